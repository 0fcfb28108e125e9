//! Test metrics, model selection across `n`, aggregation and table output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trainer::{evaluate_records, Checkpoint, Dataset, TrainError};

/// Histogram bins per axis.
pub const BINS: usize = 50;
/// Upper edge of both histogram axes.
pub const AXIS_MAX: f64 = 0.5;
/// Default number of states per histogram.
pub const HISTOGRAM_SAMPLE: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty input")]
    EmptySet,
    #[error("predictions have no spread around the reference mean")]
    DegenerateDenominator,
    #[error("histogram needs {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("non-finite value in metric input")]
    NonFinite,
}

/// True negativity and the model's final (clamped) estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub truth: f64,
    pub estimate: f64,
}

fn check(pairs: &[Pair]) -> Result<(), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    if pairs.iter().any(|p| !p.truth.is_finite() || !p.estimate.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

/// Mean absolute error of the estimates.
pub fn l1_metric(pairs: &[Pair]) -> Result<f64, EvalError> {
    check(pairs)?;
    Ok(pairs.iter().map(|p| (p.estimate - p.truth).abs()).sum::<f64>() / pairs.len() as f64)
}

/// `1 − Σ(N̂ − N)² / Σ(N̂ − m)²` where `m` is the mean prediction over the
/// training set.
pub fn r2_metric(pairs: &[Pair], train_prediction_mean: f64) -> Result<f64, EvalError> {
    check(pairs)?;
    let res: f64 = pairs.iter().map(|p| (p.estimate - p.truth).powi(2)).sum();
    let spread: f64 = pairs.iter().map(|p| (p.estimate - train_prediction_mean).powi(2)).sum();
    if spread <= 0.0 {
        return Err(EvalError::DegenerateDenominator);
    }
    Ok(1.0 - res / spread)
}

/// Textbook coefficient of determination, normalized by the variance of the
/// true values.
pub fn r2_conventional(pairs: &[Pair]) -> Result<f64, EvalError> {
    check(pairs)?;
    let mean = pairs.iter().map(|p| p.truth).sum::<f64>() / pairs.len() as f64;
    let res: f64 = pairs.iter().map(|p| (p.estimate - p.truth).powi(2)).sum();
    let spread: f64 = pairs.iter().map(|p| (p.truth - mean).powi(2)).sum();
    if spread <= 0.0 {
        return Err(EvalError::DegenerateDenominator);
    }
    Ok(1.0 - res / spread)
}

/// Which R² definition a report uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum R2Form {
    #[default]
    Literal,
    Conventional,
}

/// Test-set metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub model_id: String,
    pub strategy: String,
    pub n: usize,
    pub l1: f64,
    /// R² with the training-set prediction mean; `None` if degenerate.
    pub r2: Option<f64>,
    pub r2_conventional: Option<f64>,
    #[serde(skip)]
    pub pairs: Vec<Pair>,
}

impl RunMetrics {
    pub fn compute(
        model_id: impl Into<String>,
        strategy: impl Into<String>,
        n: usize,
        pairs: Vec<Pair>,
        train_prediction_mean: f64,
    ) -> Result<Self, EvalError> {
        let l1 = l1_metric(&pairs)?;
        let r2 = degenerate_as_none(r2_metric(&pairs, train_prediction_mean))?;
        let r2c = degenerate_as_none(r2_conventional(&pairs))?;
        Ok(Self {
            model_id: model_id.into(),
            strategy: strategy.into(),
            n,
            l1,
            r2,
            r2_conventional: r2c,
            pairs,
        })
    }

    pub fn r2_for(&self, form: R2Form) -> Option<f64> {
        match form {
            R2Form::Literal => self.r2,
            R2Form::Conventional => self.r2_conventional,
        }
    }
}

fn degenerate_as_none(r: Result<f64, EvalError>) -> Result<Option<f64>, EvalError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::DegenerateDenominator) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `(truth, clamped final estimate)` for every state of `data`.
pub fn prediction_pairs(ck: &Checkpoint, data: &Dataset) -> Result<Vec<Pair>, TrainError> {
    let mode = ck.config.measurement_mode()?;
    let records = evaluate_records(&ck.params, data, ck.config.n, &mode)?;
    Ok(records
        .iter()
        .zip(data.targets())
        .map(|(r, &truth)| Pair {
            truth,
            estimate: r.final_estimate_clamped(),
        })
        .collect())
}

/// Test metrics of a checkpoint.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, model_id: &str) -> Result<RunMetrics, TrainError> {
    let pairs = prediction_pairs(ck, data)?;
    Ok(RunMetrics::compute(
        model_id,
        ck.config.strategy(),
        ck.config.n,
        pairs,
        ck.train_prediction_mean,
    )?)
}

/// Keeps a model only if its L¹ is strictly below that of every accepted
/// model with fewer iterations. Models are visited by ascending `n`; ties in
/// `n` keep their input order and never compete with each other.
pub fn success_filter(metrics: &[RunMetrics]) -> Vec<RunMetrics> {
    let mut order: Vec<&RunMetrics> = metrics.iter().collect();
    order.sort_by_key(|m| m.n);
    let mut accepted: Vec<RunMetrics> = Vec::new();
    for m in order {
        let ok = accepted.iter().filter(|a| a.n < m.n).all(|a| m.l1 < a.l1);
        if ok {
            accepted.push(m.clone());
        }
    }
    accepted
}

/// Mean, sample standard deviation and best value of a column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub best: f64,
}

impl Summary {
    fn of(values: &[f64], best: impl Fn(f64, f64) -> f64) -> Option<Self> {
        let first = *values.first()?;
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            best: values.iter().copied().fold(first, best),
        })
    }

    /// `mean(std)` with the uncertainty in units of the last printed digit.
    pub fn formatted(&self, decimals: usize) -> String {
        format_uncertainty(self.mean, self.std, decimals)
    }
}

/// Per-column statistics over a set of models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub models: usize,
    pub l1: Summary,
    /// Over the models with a defined R².
    pub r2: Option<Summary>,
}

pub fn aggregate(metrics: &[RunMetrics], form: R2Form) -> Result<Aggregate, EvalError> {
    let l1: Vec<f64> = metrics.iter().map(|m| m.l1).collect();
    let r2: Vec<f64> = metrics.iter().filter_map(|m| m.r2_for(form)).collect();
    Ok(Aggregate {
        models: metrics.len(),
        l1: Summary::of(&l1, f64::min).ok_or(EvalError::EmptySet)?,
        r2: Summary::of(&r2, f64::max),
    })
}

/// `0.0225 ± 0.0004` at four decimals renders as `0.0225(04)`.
pub fn format_uncertainty(mean: f64, std: f64, decimals: usize) -> String {
    let digits = (std * 10f64.powi(decimals as i32)).round() as u64;
    format!("{mean:.decimals$}({digits:02})")
}

/// Joint histogram of true (rows) versus estimated (columns) negativity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    counts: Vec<u64>,
    total: u64,
}

/// Left-closed bin index; the upper edge belongs to the last bin.
pub fn bin_index(v: f64) -> usize {
    let width = AXIS_MAX / BINS as f64;
    ((v / width).floor().max(0.0) as usize).min(BINS - 1)
}

impl Histogram2D {
    pub fn count(&self, true_bin: usize, est_bin: usize) -> u64 {
        self.counts[true_bin * BINS + est_bin]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Fraction of samples whose bins differ by at least `offset`.
    pub fn mass_beyond(&self, offset: usize) -> f64 {
        let mut m = 0;
        for i in 0..BINS {
            for j in 0..BINS {
                if i.abs_diff(j) >= offset {
                    m += self.count(i, j);
                }
            }
        }
        m as f64 / self.total as f64
    }

    /// One CSV line per true-value bin, one column per estimate bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..BINS {
            let row: Vec<String> = (0..BINS).map(|j| self.count(i, j).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Histogram of the first `sample` pairs.
pub fn histogram2d(pairs: &[Pair], sample: usize) -> Result<Histogram2D, EvalError> {
    if sample == 0 {
        return Err(EvalError::EmptySet);
    }
    if pairs.len() < sample {
        return Err(EvalError::InsufficientSamples {
            needed: sample,
            got: pairs.len(),
        });
    }
    check(&pairs[..sample])?;
    let mut counts = vec![0; BINS * BINS];
    for p in &pairs[..sample] {
        counts[bin_index(p.truth) * BINS + bin_index(p.estimate)] += 1;
    }
    Ok(Histogram2D {
        counts,
        total: sample as u64,
    })
}

/// Per-model metrics table.
pub fn metrics_csv(metrics: &[RunMetrics]) -> String {
    let mut s = String::from("model_id,strategy,n,l1,r2,r2_conventional\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.model_id,
            m.strategy,
            m.n,
            m.l1,
            opt(m.r2),
            opt(m.r2_conventional)
        );
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row of a per-`n` results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    pub n: usize,
    pub trained: usize,
    pub aggregate: Aggregate,
}

/// Groups metrics by strategy, applies the success rule within each strategy
/// and aggregates the accepted models per `n`.
pub fn results_table(metrics: &[RunMetrics], form: R2Form) -> Vec<TableRow> {
    let mut strategies: Vec<&str> = metrics.iter().map(|m| m.strategy.as_str()).collect();
    strategies.sort_unstable();
    strategies.dedup();
    let mut rows = Vec::new();
    for s in strategies {
        let group: Vec<RunMetrics> = metrics.iter().filter(|m| m.strategy == s).cloned().collect();
        let accepted = success_filter(&group);
        let mut ns: Vec<usize> = group.iter().map(|m| m.n).collect();
        ns.sort_unstable();
        ns.dedup();
        for n in ns {
            let at_n: Vec<RunMetrics> = accepted.iter().filter(|m| m.n == n).cloned().collect();
            if let Ok(aggregate) = aggregate(&at_n, form) {
                rows.push(TableRow {
                    strategy: s.to_string(),
                    n,
                    trained: group.iter().filter(|m| m.n == n).count(),
                    aggregate,
                });
            }
        }
    }
    rows
}

/// CSV of a results table: `strategy,n,models,trained,l1_mean,l1_std,l1_best,
/// r2_mean,r2_std,r2_best,l1,r2` where the last two are formatted as in
/// printed tables.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("strategy,n,models,trained,l1_mean,l1_std,l1_best,r2_mean,r2_std,r2_best,l1,r2\n");
    for r in rows {
        let a = &r.aggregate;
        let (rm, rs, rb, rf) = match &a.r2 {
            Some(x) => (x.mean.to_string(), x.std.to_string(), x.best.to_string(), x.formatted(4)),
            None => Default::default(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.strategy,
            r.n,
            a.models,
            r.trained,
            a.l1.mean,
            a.l1.std,
            a.l1.best,
            rm,
            rs,
            rb,
            a.l1.formatted(4),
            rf
        );
    }
    s
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Metadata written next to every CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub config_sha256: String,
    pub generator_version: u32,
    pub tool_version: String,
}

impl Sidecar {
    pub fn new(kind: &str, config_bytes: &[u8]) -> Self {
        Self {
            kind: kind.to_string(),
            config_sha256: sha256_hex(config_bytes),
            generator_version: crate::rng::GENERATOR_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sidecar serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(f64, f64)]) -> Vec<Pair> {
        v.iter().map(|&(truth, estimate)| Pair { truth, estimate }).collect()
    }

    fn model(n: usize, l1: f64) -> RunMetrics {
        RunMetrics {
            model_id: format!("m{n}-{l1}"),
            strategy: "adaptive-last".into(),
            n,
            l1,
            r2: Some(1.0 - l1),
            r2_conventional: None,
            pairs: Vec::new(),
        }
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_metric(&pairs(&[(0.1, 0.1), (0.3, 0.3)])).unwrap(), 0.0);
        let v = l1_metric(&pairs(&[(0.0, 0.1), (0.4, 0.1)])).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
        assert_eq!(l1_metric(&[]), Err(EvalError::EmptySet));
    }

    #[test]
    fn r2_examples() {
        let p = pairs(&[(0.0, 0.0), (0.1, 0.1), (0.4, 0.4)]);
        assert_eq!(r2_metric(&p, 0.2).unwrap(), 1.0);
        assert_eq!(r2_conventional(&p).unwrap(), 1.0);
        let c = pairs(&[(0.0, 0.2), (0.3, 0.2)]);
        assert_eq!(r2_metric(&c, 0.2), Err(EvalError::DegenerateDenominator));
        // Hand-computed: residuals 0.01+0.01, spread about 0.1 is 0.01+0.04.
        let q = pairs(&[(0.1, 0.0), (0.2, 0.3)]);
        assert!((r2_metric(&q, 0.1).unwrap() - (1.0 - 0.02 / 0.05)).abs() < 1e-12);
    }

    #[test]
    fn success_rule() {
        let out = success_filter(&[model(3, 0.040), model(4, 0.045)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].n, 3);
        let seq = [model(2, 0.09), model(3, 0.05), model(5, 0.02)];
        assert_eq!(success_filter(&seq).len(), 3);
        assert_eq!(success_filter(&seq[..1]).len(), 1);
        // Rejected models do not set the bar; same-n models do not compete.
        let mixed = [model(2, 0.05), model(3, 0.06), model(4, 0.055), model(4, 0.04), model(2, 0.07)];
        let acc: Vec<(usize, f64)> = success_filter(&mixed).iter().map(|m| (m.n, m.l1)).collect();
        assert_eq!(acc, vec![(2, 0.05), (2, 0.07), (4, 0.04)]);
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[model(2, 0.03)], R2Form::Literal).unwrap();
        assert_eq!(one.l1.mean, one.l1.best);
        assert_eq!(one.l1.std, 0.0);
        let two = aggregate(&[model(2, 0.01), model(2, 0.03)], R2Form::Literal).unwrap();
        assert!((two.l1.mean - 0.02).abs() < 1e-15);
        assert_eq!(two.l1.best, 0.01);
        assert_eq!(two.r2.unwrap().best, 0.99);
        assert!(aggregate(&[], R2Form::Literal).is_err());
        assert!(aggregate(&[model(2, 0.01)], R2Form::Conventional).unwrap().r2.is_none());
        assert_eq!(format_uncertainty(0.0225, 0.0004, 4), "0.0225(04)");
        assert_eq!(format_uncertainty(0.9961, 0.0012, 4), "0.9961(12)");
    }

    #[test]
    fn histogram_binning() {
        assert_eq!(bin_index(0.0), 0);
        assert_eq!(bin_index(0.5), BINS - 1);
        assert_eq!(bin_index(0.0099), 0);
        assert_eq!(bin_index(0.25), 25);
        let perfect: Vec<Pair> = (0..100).map(|k| Pair { truth: k as f64 * 0.005, estimate: k as f64 * 0.005 }).collect();
        let h = histogram2d(&perfect, 100).unwrap();
        assert_eq!(h.total(), 100);
        assert_eq!(h.mass_beyond(1), 0.0);
        let sep: Vec<Pair> = (0..10).map(|k| Pair { truth: 0.0, estimate: k as f64 * 0.05 }).collect();
        let h = histogram2d(&sep, 10).unwrap();
        let first: u64 = (0..BINS).map(|j| h.count(0, j)).sum();
        assert_eq!(first, 10);
        assert_eq!(h.to_csv().lines().count(), BINS);
        assert_eq!(
            histogram2d(&sep, 4096),
            Err(EvalError::InsufficientSamples { needed: 4096, got: 10 })
        );
    }

    #[test]
    fn table_rows_per_strategy_and_n() {
        let mut ms = Vec::new();
        for s in ["adaptive-last", "fixed-last"] {
            for (n, l1) in [(2, 0.09), (3, 0.05), (5, 0.02)] {
                let mut m = model(n, l1);
                m.strategy = s.into();
                ms.push(m);
            }
        }
        let rows = results_table(&ms, R2Form::Literal);
        assert_eq!(rows.len(), 6);
        let csv = table_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().starts_with("adaptive-last,2,1,1,"));
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
