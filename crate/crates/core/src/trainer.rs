//! Mini-batch training with validation-driven batch doubling.
//!
//! Each epoch walks a reshuffled training set in mini-batches of the current
//! size `B`, then evaluates the full validation set. After `patience` epochs
//! without improvement `B` doubles (up to `batch_max`); a stall at
//! `batch_max` ends the run. The best validation model is kept.
//!
//! Mini-batch gradients are computed over fixed-size chunks that are reduced
//! in chunk order, so results do not depend on the number of worker threads.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adgrad::{AdError, AdamState, Tape, Tensor, Var};
use crate::policynet::{
    init_params, rollout_graph, validate_iterations, validate_mode, BasisList, Estimates,
    MeasurementMode, ModelParams, PolicyError, RolloutRecord,
};
use crate::qstate::{build_effective_operator, EffectiveOperator, LabeledState, StateError, SystemKind};
use crate::rng::{mix_seed, SeededStream};

/// Validation improvements smaller than this do not reset patience.
pub const IMPROVEMENT_SLACK: f64 = 1e-7;
/// Global gradient-norm safety clip.
pub const GRAD_CLIP: f64 = 100.0;
/// Default number of states per gradient chunk.
pub const DEFAULT_CHUNK: usize = 32;
/// States per chunk for forward-only evaluation.
const EVAL_CHUNK: usize = 512;

const TRAIN_TAG: u64 = 1;
const VAL_TAG: u64 = 2;
const TEST_TAG: u64 = 3;
const SHUFFLE_TAG: u64 = 0x5348_5546;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("{records} records but {targets} targets")]
    LengthMismatch { records: usize, targets: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Greedy,
    Last,
}

impl ModeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Adaptive => "adaptive",
            ModeKind::Fixed => "fixed",
        }
    }
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Greedy => "greedy",
            LossKind::Last => "last",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
}

/// One training run. Serialized as the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemKind,
    pub mode: ModeKind,
    pub loss: LossKind,
    pub n: usize,
    #[serde(default = "defaults::train_size")]
    pub train_size: usize,
    #[serde(default = "defaults::val_size")]
    pub val_size: usize,
    #[serde(default = "defaults::test_size")]
    pub test_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch_start")]
    pub batch_start: usize,
    #[serde(default = "defaults::batch_max")]
    pub batch_max: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    /// Optional hard cap on epochs, for short runs.
    #[serde(default)]
    pub max_epochs: Option<usize>,
    pub seeds: Seeds,
    /// Fixed mode only; the built-in list is used when absent.
    #[serde(default)]
    pub basis_list: Option<PathBuf>,
    #[serde(default = "defaults::chunk")]
    pub chunk: usize,
}

mod defaults {
    pub fn train_size() -> usize {
        1 << 18
    }
    pub fn val_size() -> usize {
        1 << 16
    }
    pub fn test_size() -> usize {
        1 << 16
    }
    pub fn lr() -> f64 {
        0.001
    }
    pub fn batch_start() -> usize {
        32
    }
    pub fn batch_max() -> usize {
        512
    }
    pub fn patience() -> usize {
        10
    }
    pub fn chunk() -> usize {
        super::DEFAULT_CHUNK
    }
}

impl RunConfig {
    /// Full-size defaults for the given strategy.
    pub fn new(system: SystemKind, mode: ModeKind, loss: LossKind, n: usize, seeds: Seeds) -> Self {
        Self {
            system,
            mode,
            loss,
            n,
            train_size: defaults::train_size(),
            val_size: defaults::val_size(),
            test_size: defaults::test_size(),
            lr: defaults::lr(),
            batch_start: defaults::batch_start(),
            batch_max: defaults::batch_max(),
            patience: defaults::patience(),
            max_epochs: None,
            seeds,
            basis_list: None,
            chunk: DEFAULT_CHUNK,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::ConfigInvalid(m));
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_start == 0 || self.batch_max < self.batch_start {
            return bad(format!(
                "batch sizes need 0 < start ({}) <= max ({})",
                self.batch_start, self.batch_max
            ));
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if self.chunk == 0 {
            return bad("chunk size must be positive".into());
        }
        if self.mode == ModeKind::Adaptive && self.basis_list.is_some() {
            return bad("a basis list only applies to fixed mode".into());
        }
        validate_iterations(self.system, self.n)?;
        Ok(())
    }

    /// Resolves the measurement mode, loading the basis list if needed.
    pub fn measurement_mode(&self) -> Result<MeasurementMode, TrainError> {
        let mode = match self.mode {
            ModeKind::Adaptive => MeasurementMode::Adaptive,
            ModeKind::Fixed => MeasurementMode::Fixed(match &self.basis_list {
                Some(path) => BasisList::load(self.system, path)?,
                None => BasisList::default_for(self.system),
            }),
        };
        validate_mode(self.system, self.n, &mode)?;
        Ok(mode)
    }

    pub fn train_seed(&self) -> u64 {
        mix_seed(self.seeds.data, TRAIN_TAG)
    }

    pub fn val_seed(&self) -> u64 {
        mix_seed(self.seeds.data, VAL_TAG)
    }

    pub fn test_seed(&self) -> u64 {
        mix_seed(self.seeds.data, TEST_TAG)
    }

    /// Short label such as `adaptive-last`.
    pub fn strategy(&self) -> String {
        format!("{}-{}", self.mode.as_str(), self.loss.as_str())
    }
}

/// Labeled states held as effective operators.
#[derive(Debug, Clone)]
pub struct Dataset {
    system: SystemKind,
    operators: Vec<EffectiveOperator>,
    targets: Vec<f64>,
}

impl Dataset {
    /// States `0..count` of the stream family `seed`.
    pub fn generate(system: SystemKind, seed: u64, count: usize) -> Result<Self, TrainError> {
        let pairs = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let s = LabeledState::generate(system, seed, i)?;
                Ok((build_effective_operator(&s.rho), s.negativity))
            })
            .collect::<Result<Vec<_>, StateError>>()?;
        let (operators, targets) = pairs.into_iter().unzip();
        Ok(Self {
            system,
            operators,
            targets,
        })
    }

    pub fn from_parts(
        system: SystemKind,
        operators: Vec<EffectiveOperator>,
        targets: Vec<f64>,
    ) -> Result<Self, TrainError> {
        if operators.len() != targets.len() {
            return Err(TrainError::LengthMismatch {
                records: operators.len(),
                targets: targets.len(),
            });
        }
        Ok(Self {
            system,
            operators,
            targets,
        })
    }

    pub fn system(&self) -> SystemKind {
        self.system
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn operators(&self) -> &[EffectiveOperator] {
        &self.operators
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

fn check_lengths(records: &[RolloutRecord], targets: &[f64]) -> Result<(), TrainError> {
    if records.len() != targets.len() || records.is_empty() {
        return Err(TrainError::LengthMismatch {
            records: records.len(),
            targets: targets.len(),
        });
    }
    Ok(())
}

/// Mean squared error over every iteration's estimate.
pub fn loss_greedy(records: &[RolloutRecord], targets: &[f64]) -> Result<f64, TrainError> {
    check_lengths(records, targets)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in records.iter().zip(targets) {
        for &e in &r.estimates {
            total += (e - t) * (e - t);
        }
        count += r.estimates.len();
    }
    if count == 0 {
        return Err(TrainError::LengthMismatch {
            records: 0,
            targets: targets.len(),
        });
    }
    Ok(total / count as f64)
}

/// Mean squared error of the final estimate.
pub fn loss_last(records: &[RolloutRecord], targets: &[f64]) -> Result<f64, TrainError> {
    check_lengths(records, targets)?;
    let mut total = 0.0;
    for (r, &t) in records.iter().zip(targets) {
        let e = *r.estimates.last().ok_or(TrainError::LengthMismatch {
            records: 0,
            targets: targets.len(),
        })?;
        total += (e - t) * (e - t);
    }
    Ok(total / records.len() as f64)
}

/// Scalar loss node over a rollout graph.
fn loss_on_tape(tape: &mut Tape, estimates: &[Option<Var>], targets: Var, kind: LossKind) -> Result<Var, AdError> {
    match kind {
        LossKind::Last => {
            let e = estimates.last().copied().flatten().expect("final estimate recorded");
            let d = tape.sub(e, targets)?;
            Ok(tape.mean_square(d))
        }
        LossKind::Greedy => {
            let mut total: Option<Var> = None;
            for e in estimates {
                let e = e.expect("every estimate recorded");
                let d = tape.sub(e, targets)?;
                let l = tape.mean_square(d);
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("at least one iteration");
            Ok(tape.scale(total, 1.0 / estimates.len() as f64))
        }
    }
}

fn estimates_for(kind: LossKind) -> Estimates {
    match kind {
        LossKind::Greedy => Estimates::Every,
        LossKind::Last => Estimates::LastOnly,
    }
}

fn gather<'a>(data: &'a Dataset, idx: &[usize]) -> (Vec<&'a EffectiveOperator>, Tensor) {
    let ops = idx.iter().map(|&i| &data.operators[i]).collect();
    let t = Tensor::matrix(idx.len(), 1, idx.iter().map(|&i| data.targets[i]).collect()).expect("column");
    (ops, t)
}

/// Loss and parameter gradients over one set of states.
pub fn loss_and_gradients(
    params: &ModelParams,
    data: &Dataset,
    idx: &[usize],
    n: usize,
    mode: &MeasurementMode,
    kind: LossKind,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let (ops, targets) = gather(data, idx);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let g = rollout_graph(&mut tape, &bound, &ops, n, mode, estimates_for(kind))?;
    let t = tape.constant(targets);
    let loss = loss_on_tape(&mut tape, &g.estimates, t, kind)?;
    let value = tape.value(loss).item().expect("scalar loss");
    let mut grads = tape.backward(loss)?;
    let tensors = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, tensors))
}

/// Mini-batch gradient, reduced over fixed chunks in order.
fn batch_gradients(
    params: &ModelParams,
    data: &Dataset,
    batch: &[usize],
    chunk: usize,
    n: usize,
    mode: &MeasurementMode,
    kind: LossKind,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let parts = batch
        .par_chunks(chunk)
        .map(|c| loss_and_gradients(params, data, c, n, mode, kind).map(|r| (c.len(), r)))
        .collect::<Result<Vec<_>, _>>()?;
    let total = batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (len, (l, grads)) in parts {
        let w = len as f64 / total;
        loss += w * l;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += w * y;
            }
        }
    }
    Ok((loss, acc))
}

fn clip(grads: &mut [Tensor]) -> f64 {
    let norm = grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt();
    if norm > GRAD_CLIP {
        let s = GRAD_CLIP / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Forward-only records over a whole dataset, in dataset order.
pub fn evaluate_records(
    params: &ModelParams,
    data: &Dataset,
    n: usize,
    mode: &MeasurementMode,
) -> Result<Vec<RolloutRecord>, TrainError> {
    let ops: Vec<&EffectiveOperator> = data.operators.iter().collect();
    let parts = ops
        .par_chunks(EVAL_CHUNK)
        .map(|c| crate::policynet::rollout_operators(params, c, n, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Loss of the given kind over a whole dataset without gradient tracking.
pub fn evaluate_loss(
    params: &ModelParams,
    data: &Dataset,
    n: usize,
    mode: &MeasurementMode,
    kind: LossKind,
) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let sums = idx
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let (ops, targets) = gather(data, c);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let g = rollout_graph(&mut tape, &bound, &ops, n, mode, estimates_for(kind))?;
            let t = tape.constant(targets);
            let loss = loss_on_tape(&mut tape, &g.estimates, t, kind)?;
            Ok(tape.value(loss).item().expect("scalar") * c.len() as f64)
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    let loss = sums.iter().sum::<f64>() / data.len() as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("validation loss"));
    }
    Ok(loss)
}

/// One validation evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batch_size: usize,
    pub val_loss: f64,
}

/// Best-validation snapshot of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: RunConfig,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    /// Mean clamped final estimate of the best model over the training set.
    pub train_prediction_mean: f64,
}

/// Datasets for a config, generated from the data seed.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
}

impl RunData {
    pub fn generate(config: &RunConfig) -> Result<Self, TrainError> {
        Ok(Self {
            train: Dataset::generate(config.system, config.train_seed(), config.train_size)?,
            val: Dataset::generate(config.system, config.val_seed(), config.val_size)?,
        })
    }
}

/// Test set for a config.
pub fn test_dataset(config: &RunConfig) -> Result<Dataset, TrainError> {
    Dataset::generate(config.system, config.test_seed(), config.test_size)
}

pub fn train(config: &RunConfig) -> Result<Checkpoint, TrainError> {
    train_with(config, None, |_| {})
}

/// Trains with optional pre-generated data and a per-epoch observer.
pub fn train_with(
    config: &RunConfig,
    data: Option<&RunData>,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    let mode = config.measurement_mode()?;
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            owned = RunData::generate(config)?;
            &owned
        }
    };
    if data.train.system() != config.system || data.val.system() != config.system {
        return Err(TrainError::ConfigInvalid("datasets do not match the configured system".into()));
    }
    let (n, kind) = (config.n, config.loss);

    let mut params = init_params(config.system, config.seeds.model);
    let mut adam = AdamState::new(params.tensors(), config.lr);
    let mut batch = config.batch_start;

    let val0 = evaluate_loss(&params, &data.val, n, &mode, kind)?;
    let first = EpochRecord {
        epoch: 0,
        batch_size: batch,
        val_loss: val0,
    };
    observe(&first);
    let mut history = vec![first];
    let (mut best, mut best_params, mut best_epoch) = (val0, params.clone(), 0);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let shuffle_seed = mix_seed(config.seeds.model, SHUFFLE_TAG);
    let mut stall = 0;
    let mut epoch = 0;
    loop {
        if config.max_epochs.is_some_and(|m| epoch >= m) {
            break;
        }
        epoch += 1;
        order.sort_unstable();
        SeededStream::new(shuffle_seed, epoch as u64).shuffle(&mut order);
        for mb in order.chunks(batch) {
            let (loss, mut grads) = batch_gradients(&params, &data.train, mb, config.chunk, n, &mode, kind)?;
            let norm = clip(&mut grads);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(TrainError::NonFinite("training gradient"));
            }
            adam.step(&mut params.tensors_mut(), &grads)?;
        }
        let val = evaluate_loss(&params, &data.val, n, &mode, kind)?;
        let rec = EpochRecord {
            epoch,
            batch_size: batch,
            val_loss: val,
        };
        observe(&rec);
        history.push(rec);
        if val < best - IMPROVEMENT_SLACK {
            best = val;
            best_params = params.clone();
            best_epoch = epoch;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                if batch >= config.batch_max {
                    break;
                }
                batch = (batch * 2).min(config.batch_max);
                stall = 0;
            }
        }
    }

    let train_records = evaluate_records(&best_params, &data.train, n, &mode)?;
    let train_prediction_mean = train_records
        .iter()
        .map(RolloutRecord::final_estimate_clamped)
        .sum::<f64>()
        / train_records.len() as f64;

    Ok(Checkpoint {
        params: best_params,
        config: config.clone(),
        best_val_loss: best,
        best_epoch,
        epochs_run: epoch,
        history,
        train_prediction_mean,
    })
}

/// Config of repeat `k` in a series: model seed offset by `k`, shared data.
pub fn series_config(config: &RunConfig, k: usize) -> RunConfig {
    let mut c = config.clone();
    c.seeds.model = config.seeds.model.wrapping_add(k as u64);
    c
}

/// Independent repeats sharing one dataset.
pub fn train_series(config: &RunConfig, repeats: usize) -> Result<Vec<Checkpoint>, TrainError> {
    if repeats == 0 {
        return Err(TrainError::ConfigInvalid("repeats must be at least 1".into()));
    }
    config.validate()?;
    let data = RunData::generate(config)?;
    (0..repeats)
        .into_par_iter()
        .map(|k| train_with(&series_config(config, k), Some(&data), |_| {}))
        .collect()
}
