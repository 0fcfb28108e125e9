use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use negadapt::adgrad::Tensor;
use negadapt::numkit::eig_hermitian;
use negadapt::policynet::{init_params, input_width, rollout_operators, step, MeasurementMode, HIDDEN};
use negadapt::qstate::{
    build_effective_operator, build_two_copy, collective_probability, negativity, random_density_matrix,
    EffectiveOperator, ProjectorParams, SystemKind,
};
use negadapt::trainer::{loss_and_gradients, Dataset, LossKind};

const SYSTEMS: [SystemKind; 2] = [SystemKind::QubitQubit, SystemKind::QubitQutrit];

fn physics(c: &mut Criterion) {
    let mut g = c.benchmark_group("physics");
    for system in SYSTEMS {
        let rho = random_density_matrix(system, 1);
        let omega = build_two_copy(&rho);
        g.bench_with_input(BenchmarkId::new("eig_two_copy", system), &omega, |b, m| {
            b.iter(|| eig_hermitian(black_box(m)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("negativity", system), &rho, |b, r| {
            b.iter(|| negativity(black_box(r)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("effective_operator", system), &rho, |b, r| {
            b.iter(|| build_effective_operator(black_box(r)))
        });
        let m = build_effective_operator(&rho);
        let len = system.param_len();
        let x = ProjectorParams((0..len).map(|k| (k as f64 * 0.37).sin()).collect());
        let y = ProjectorParams((0..len).map(|k| (k as f64 * 0.71).cos()).collect());
        g.bench_function(BenchmarkId::new("probability", system), |b| {
            b.iter(|| collective_probability(black_box(&m), &x, &y).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    g.sample_size(20);
    for system in SYSTEMS {
        let params = init_params(system, 0);
        let rows = 32;
        let hidden = Tensor::zeros(&[rows, HIDDEN]);
        let cell = Tensor::zeros(&[rows, HIDDEN]);
        let input = Tensor::filled(&[rows, input_width(system)], 0.1);
        g.bench_function(BenchmarkId::new("step_b32", system), |b| {
            b.iter(|| step(&params, &hidden, &cell, black_box(&input)).unwrap())
        });

        let ops: Vec<EffectiveOperator> =
            (0..rows as u64).map(|s| build_effective_operator(&random_density_matrix(system, s))).collect();
        let refs: Vec<&EffectiveOperator> = ops.iter().collect();
        g.bench_function(BenchmarkId::new("rollout_b32_n5", system), |b| {
            b.iter(|| rollout_operators(&params, black_box(&refs), 5, &MeasurementMode::Adaptive).unwrap())
        });

        let data = Dataset::from_parts(system, ops.clone(), vec![0.1; rows]).unwrap();
        let idx: Vec<usize> = (0..rows).collect();
        g.bench_function(BenchmarkId::new("loss_and_gradients_b32_n5", system), |b| {
            b.iter(|| {
                loss_and_gradients(&params, &data, black_box(&idx), 5, &MeasurementMode::Adaptive, LossKind::Last)
                    .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, physics, network);
criterion_main!(benches);
