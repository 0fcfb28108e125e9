use negadapt::adgrad::check::{check_gradients, relative_error};
use negadapt::adgrad::{Tape, Tensor};
use negadapt::evalkit::{
    aggregate, histogram2d, l1_metric, success_filter, Pair, R2Form, RunMetrics, BINS,
};
use negadapt::formats::{decode_checkpoint, encode_checkpoint};
use negadapt::policynet::{
    init_params, rollout_graph, BasisList, BoundParams, Estimates, MeasurementMode, ModelParams, RolloutRecord,
    PARAM_NAMES,
};
use negadapt::qstate::{build_effective_operator, random_density_matrix, EffectiveOperator, ProjectorParams, SystemKind};
use negadapt::rng::SeededStream;
use negadapt::trainer::{
    evaluate_loss, loss_and_gradients, loss_greedy, loss_last, train, Dataset, LossKind, ModeKind, RunConfig, Seeds,
};
use proptest::prelude::*;

fn operators(system: SystemKind, seeds: std::ops::Range<u64>) -> Vec<EffectiveOperator> {
    seeds.map(|s| build_effective_operator(&random_density_matrix(system, s))).collect()
}

/// Final-estimate loss of an n = 3 rollout, differentiated with respect to
/// the named tensors.
fn rollout_check(system: SystemKind, mode: MeasurementMode, names: &[&str]) -> f64 {
    // With seed 21 one qutrit head unit sits 4e-8 from its ReLU kink.
    let params = init_params(system, 22);
    let ops = operators(system, 0..3);
    let refs: Vec<&EffectiveOperator> = ops.iter().collect();
    let targets = Tensor::matrix(3, 1, vec![0.1, 0.0, 0.3]).unwrap();
    let idx: Vec<usize> = names.iter().map(|n| PARAM_NAMES.iter().position(|p| p == n).unwrap()).collect();
    let inputs: Vec<Tensor> = idx.iter().map(|&k| params.tensors()[k].clone()).collect();
    check_gradients(&inputs, 1e-5, |tape, vars| {
        let base = params.bind(tape, false);
        let mut all = *base.vars();
        for (&k, &v) in idx.iter().zip(vars) {
            all[k] = v;
        }
        let bound = BoundParams::from_vars(system, all);
        let g = rollout_graph(tape, &bound, &refs, 3, &mode, Estimates::Every).map_err(|e| match e {
            negadapt::policynet::PolicyError::Ad(a) => a,
            other => panic!("{other}"),
        })?;
        let t = tape.constant(targets.clone());
        let mut total = None;
        for e in g.estimates.iter().flatten() {
            let d = tape.sub(*e, t)?;
            let l = tape.mean_square(d);
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap()
}

#[test]
fn adaptive_rollout_gradients_match_finite_differences() {
    // The proposal biases reach the loss only through the measurement node.
    let names = ["proposal.b2", "negativity.b2", "lstm.bias", "negativity.w2"];
    for system in [SystemKind::QubitQubit, SystemKind::QubitQutrit] {
        let err = rollout_check(system, MeasurementMode::Adaptive, &names);
        assert!(err < 1e-4, "{system}: {err:e}");
    }
}

#[test]
fn fixed_rollout_gradients_match_finite_differences() {
    let system = SystemKind::QubitQubit;
    let mode = MeasurementMode::Fixed(BasisList::default_for(system));
    let err = rollout_check(system, mode, &["lstm.bias", "negativity.w2", "negativity.b1"]);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn full_parameter_directional_derivative() {
    let system = SystemKind::QubitQubit;
    let params = init_params(system, 4);
    let ops = operators(system, 10..14);
    let data = Dataset::from_parts(system, ops, vec![0.0, 0.1, 0.2, 0.05]).unwrap();
    let idx: Vec<usize> = (0..4).collect();
    let mode = MeasurementMode::Adaptive;
    let (_, grads) = loss_and_gradients(&params, &data, &idx, 4, &mode, LossKind::Greedy).unwrap();

    let mut rng = SeededStream::new(8, 0);
    let dir: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap())
        .collect();
    let analytic: f64 = grads
        .iter()
        .zip(&dir)
        .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let shifted = |h: f64| {
        let mut p = params.clone();
        for (t, d) in p.tensors_mut().into_iter().zip(&dir) {
            t.data_mut().iter_mut().zip(d.data()).for_each(|(w, v)| *w += h * v);
        }
        evaluate_loss(&p, &data, 4, &mode, LossKind::Greedy).unwrap()
    };
    // Larger steps cross ReLU kinks somewhere among ~10^5 perturbed weights.
    let h = 1e-7;
    let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
    assert!(relative_error(&[analytic], &[numeric]) < 1e-4, "{analytic} vs {numeric}");
}

#[test]
fn zero_parameters_give_zero_gradient_for_constant_target() {
    let system = SystemKind::QubitQutrit;
    let params = ModelParams::zeros(system);
    let ops = operators(system, 0..2);
    let data = Dataset::from_parts(system, ops, vec![0.0, 0.0]).unwrap();
    let (loss, grads) =
        loss_and_gradients(&params, &data, &[0, 1], 3, &MeasurementMode::Adaptive, LossKind::Last).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

fn smoke_config() -> RunConfig {
    let mut c = RunConfig::new(
        SystemKind::QubitQubit,
        ModeKind::Adaptive,
        LossKind::Last,
        3,
        Seeds { data: 3, model: 1 },
    );
    c.train_size = 1 << 10;
    c.val_size = 1 << 9;
    c.test_size = 1 << 9;
    c.patience = 3;
    c.max_epochs = Some(30);
    c
}

#[test]
fn smoke_training_improves_on_initial_model() {
    let ck = train(&smoke_config()).unwrap();
    let initial = ck.history[0].val_loss;
    assert!(ck.best_val_loss < initial, "{} !< {initial}", ck.best_val_loss);
    assert!(ck.history.len() <= 31);
    let sizes: Vec<usize> = ck.history.iter().map(|r| r.batch_size).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    assert!(sizes.iter().all(|b| [32, 64, 128, 256, 512].contains(b)));
    let min = ck.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(ck.best_val_loss, min);
}

#[test]
fn identical_runs_give_identical_checkpoint_bytes() {
    let mut c = smoke_config();
    c.max_epochs = Some(3);
    let a = encode_checkpoint(&train(&c).unwrap());
    let b = encode_checkpoint(&train(&c).unwrap());
    assert_eq!(a, b);
    c.seeds.model += 1;
    assert_ne!(a, encode_checkpoint(&train(&c).unwrap()));
}

#[test]
fn stored_checkpoint_reproduces_validation_loss() {
    let mut c = smoke_config();
    c.max_epochs = Some(4);
    let ck = train(&c).unwrap();
    let stored = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
    let val = Dataset::generate(c.system, c.val_seed(), c.val_size).unwrap();
    let mode = c.measurement_mode().unwrap();
    let again = evaluate_loss(&stored.params, &val, c.n, &mode, c.loss).unwrap();
    let rel = (again - ck.best_val_loss).abs() / ck.best_val_loss;
    assert!(rel < 1e-4, "{again} vs {}", ck.best_val_loss);
}

fn records_strategy() -> impl Strategy<Value = (Vec<RolloutRecord>, Vec<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(b, n)| {
        (
            proptest::collection::vec(proptest::collection::vec(-0.5f64..1.0, n), b),
            proptest::collection::vec(0.0f64..0.5, b),
        )
            .prop_map(move |(est, targets)| {
                let recs = est
                    .into_iter()
                    .map(|e| RolloutRecord {
                        probabilities: vec![0.0; n],
                        x: vec![ProjectorParams::basis(2, 0); n],
                        y: vec![ProjectorParams::basis(2, 0); n],
                        estimates: e,
                    })
                    .collect();
                (recs, targets)
            })
    })
}

fn metrics(n: usize, l1: f64, r2: f64) -> RunMetrics {
    RunMetrics {
        model_id: format!("{n}-{l1}"),
        strategy: "s".into(),
        n,
        l1,
        r2: Some(r2),
        r2_conventional: Some(r2),
        pairs: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn greedy_loss_is_mean_of_per_iteration_losses((recs, targets) in records_strategy()) {
        let n = recs[0].estimates.len();
        let per_iter: f64 = (0..n)
            .map(|i| {
                let truncated: Vec<RolloutRecord> = recs
                    .iter()
                    .map(|r| RolloutRecord { estimates: r.estimates[..=i].to_vec(), ..r.clone() })
                    .collect();
                loss_last(&truncated, &targets).unwrap()
            })
            .sum::<f64>() / n as f64;
        prop_assert!((loss_greedy(&recs, &targets).unwrap() - per_iter).abs() < 1e-12);
    }

    #[test]
    fn l1_squared_bounded_by_last_loss((recs, targets) in records_strategy()) {
        let pairs: Vec<Pair> = recs
            .iter()
            .zip(&targets)
            .map(|(r, &t)| Pair { truth: t, estimate: *r.estimates.last().unwrap() })
            .collect();
        let l1 = l1_metric(&pairs).unwrap();
        prop_assert!(l1 * l1 <= loss_last(&recs, &targets).unwrap() + 1e-15);
    }

    #[test]
    fn aggregation_is_permutation_invariant(
        vals in proptest::collection::vec((0.0f64..0.2, 0.0f64..1.0), 1..10),
        seed in any::<u64>(),
    ) {
        let ms: Vec<RunMetrics> = vals.iter().map(|&(l, r)| metrics(3, l, r)).collect();
        let mut shuffled = ms.clone();
        SeededStream::new(seed, 0).shuffle(&mut shuffled);
        let a = aggregate(&ms, R2Form::Literal).unwrap();
        let b = aggregate(&shuffled, R2Form::Literal).unwrap();
        prop_assert!((a.l1.mean - b.l1.mean).abs() < 1e-15);
        prop_assert!((a.l1.std - b.l1.std).abs() < 1e-14);
        prop_assert_eq!(a.l1.best, b.l1.best);
        prop_assert_eq!(a.r2.unwrap().best, b.r2.unwrap().best);
    }

    #[test]
    fn accepted_models_improve_with_n(vals in proptest::collection::vec((2usize..11, 0.0f64..0.2), 1..12)) {
        let ms: Vec<RunMetrics> = vals.iter().map(|&(n, l)| metrics(n, l, 0.5)).collect();
        let acc = success_filter(&ms);
        prop_assert!(!acc.is_empty());
        for a in &acc {
            for b in &acc {
                if a.n < b.n {
                    prop_assert!(b.l1 < a.l1);
                }
            }
        }
    }

    #[test]
    fn histogram_respects_markov_bound(
        pairs in proptest::collection::vec((0.0f64..=0.5, 0.0f64..=0.5), 16..200),
    ) {
        let pairs: Vec<Pair> = pairs.into_iter().map(|(truth, estimate)| Pair { truth, estimate }).collect();
        let h = histogram2d(&pairs, pairs.len()).unwrap();
        let total: u64 = (0..BINS).flat_map(|i| (0..BINS).map(move |j| (i, j))).map(|(i, j)| h.count(i, j)).sum();
        prop_assert_eq!(total, pairs.len() as u64);
        let l1 = l1_metric(&pairs).unwrap();
        prop_assert!(h.mass_beyond(11) <= l1 / 0.1 + 1e-12);
    }
}

#[test]
fn tape_evaluation_is_replayable() {
    let system = SystemKind::QubitQubit;
    let params = init_params(system, 2);
    let ops = operators(system, 0..5);
    let refs: Vec<&EffectiveOperator> = ops.iter().collect();
    let run = || {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let g = rollout_graph(&mut tape, &b, &refs, 4, &MeasurementMode::Adaptive, Estimates::Every).unwrap();
        g.estimates.iter().flatten().map(|&e| tape.value(e).clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

