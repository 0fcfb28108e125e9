//! The recurrent estimator/proposer and the measurement rollout.
//!
//! One LSTM cell (hidden size 128) feeds two heads, each
//! `FC(128→256) → ReLU → FC`: a linear negativity head with one output and a
//! proposal head emitting raw parameters for the next `x` and `y`
//! projectors. Each iteration's input is `[s·P_i, x̂_i, ŷ_i]`, the measured
//! probability (times [`probability_feature_scale`]) followed by the
//! normalized projectors that produced it.
//!
//! Iteration 1 always measures with `x = y = |0>`. Later iterations use the
//! previous proposal (adaptive mode) or the next entry of a fixed basis list.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adgrad::{AdError, Tape, Tensor, Var};
use crate::qstate::{build_effective_operator, DensityMatrix, EffectiveOperator, ProjectorParams, StateError, SystemKind};
use crate::rng::SeededStream;

pub const HIDDEN: usize = 128;
pub const HEAD_WIDTH: usize = 256;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("iteration count {n} outside 2..={max} for {system}")]
    BadIterationCount { n: usize, max: usize, system: SystemKind },
    #[error("basis list has {got} entries but {needed} iterations were requested")]
    BasisListTooShort { needed: usize, got: usize },
    #[error("invalid basis list: {0}")]
    InvalidBasisList(String),
    #[error("parameter set does not match the architecture: {0}")]
    ArchitectureMismatch(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("reading basis list: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing basis list: {0}")]
    Json(#[from] serde_json::Error),
}

/// Width of the per-iteration input vector.
pub const fn input_width(system: SystemKind) -> usize {
    1 + 2 * system.param_len()
}

/// Width of the proposal head output (`x` then `y` raw parameters).
pub const fn proposal_width(system: SystemKind) -> usize {
    2 * system.param_len()
}

/// Factor applied to `P_i` before it enters the network. The maximally mixed
/// state gives `P = 1/dim(Ω)`, so scaled features sit around one, comparable
/// to the projector components.
pub const fn probability_feature_scale(system: SystemKind) -> f64 {
    system.two_copy_dim() as f64
}

/// Names of the parameter tensors, in storage order.
pub const PARAM_NAMES: [&str; 11] = [
    "lstm.w_input",
    "lstm.w_hidden",
    "lstm.bias",
    "negativity.w1",
    "negativity.b1",
    "negativity.w2",
    "negativity.b2",
    "proposal.w1",
    "proposal.b1",
    "proposal.w2",
    "proposal.b2",
];

/// Shapes matching [`PARAM_NAMES`].
pub fn param_shapes(system: SystemKind) -> [[usize; 2]; 11] {
    [
        [input_width(system), 4 * HIDDEN],
        [HIDDEN, 4 * HIDDEN],
        [1, 4 * HIDDEN],
        [HIDDEN, HEAD_WIDTH],
        [1, HEAD_WIDTH],
        [HEAD_WIDTH, 1],
        [1, 1],
        [HIDDEN, HEAD_WIDTH],
        [1, HEAD_WIDTH],
        [HEAD_WIDTH, proposal_width(system)],
        [1, proposal_width(system)],
    ]
}

/// Model weights. LSTM gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    system: SystemKind,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(system: SystemKind) -> Self {
        Self {
            system,
            tensors: param_shapes(system).iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Rebuilds parameters from `(name, tensor)` pairs in any order.
    pub fn from_named(system: SystemKind, named: Vec<(String, Tensor)>) -> Result<Self, PolicyError> {
        let shapes = param_shapes(system);
        let mut slots: Vec<Option<Tensor>> = vec![None; PARAM_NAMES.len()];
        for (name, t) in named {
            let k = PARAM_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| PolicyError::ArchitectureMismatch(format!("unknown tensor {name}")))?;
            if t.shape() != shapes[k] {
                return Err(PolicyError::ArchitectureMismatch(format!(
                    "{name}: expected {:?}, got {:?}",
                    shapes[k],
                    t.shape()
                )));
            }
            slots[k] = Some(t);
        }
        let tensors = slots
            .into_iter()
            .zip(PARAM_NAMES)
            .map(|(t, n)| t.ok_or_else(|| PolicyError::ArchitectureMismatch(format!("missing tensor {n}"))))
            .collect::<Result<_, _>>()?;
        Ok(Self { system, tensors })
    }

    pub fn system(&self) -> SystemKind {
        self.system
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|k| &self.tensors[k])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(move |k| &mut self.tensors[k])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Rounds every weight to 32-bit precision (the checkpoint storage format).
    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// Records the parameters on a tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Vec<_>>();
        BoundParams {
            system: self.system,
            vars: vars.try_into().expect("eleven tensors"),
        }
    }
}

/// `uniform(±1/√fan_in)` weights, zero biases, forget-gate bias one.
/// Tensor `k` is drawn from stream `k` of `seed`.
pub fn init_params(system: SystemKind, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(system);
    for (k, (name, t)) in PARAM_NAMES.iter().zip(params.tensors.iter_mut()).enumerate() {
        if name.contains(".w") {
            let bound = 1.0 / (t.rows() as f64).sqrt();
            let mut rng = SeededStream::new(seed, k as u64);
            t.data_mut().iter_mut().for_each(|w| *w = rng.uniform_in(-bound, bound));
        }
    }
    let bias = params.get_mut("lstm.bias").expect("lstm bias");
    bias.data_mut()[HIDDEN..2 * HIDDEN].fill(1.0);
    params
}

/// Parameter leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    system: SystemKind,
    vars: [Var; 11],
}

impl BoundParams {
    /// Parameter nodes in [`PARAM_NAMES`] order.
    pub fn from_vars(system: SystemKind, vars: [Var; 11]) -> Self {
        Self { system, vars }
    }

    pub fn vars(&self) -> &[Var; 11] {
        &self.vars
    }

    pub fn system(&self) -> SystemKind {
        self.system
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
    let p = tape.matmul(x, w)?;
    tape.add(p, b)
}

/// LSTM update; returns `(hidden′, cell′)`.
pub fn lstm_cell(tape: &mut Tape, p: &BoundParams, hidden: Var, cell: Var, input: Var) -> Result<(Var, Var), AdError> {
    let [w_in, w_hid, bias, ..] = p.vars;
    let a = tape.matmul(input, w_in)?;
    let b = tape.matmul(hidden, w_hid)?;
    let s = tape.add(a, b)?;
    let gates = tape.add(s, bias)?;
    let i_pre = tape.slice(gates, 0, HIDDEN)?;
    let f_pre = tape.slice(gates, HIDDEN, 2 * HIDDEN)?;
    let g_pre = tape.slice(gates, 2 * HIDDEN, 3 * HIDDEN)?;
    let o_pre = tape.slice(gates, 3 * HIDDEN, 4 * HIDDEN)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.hadamard(f, cell)?;
    let write = tape.hadamard(i, g)?;
    let cell_next = tape.add(keep, write)?;
    let squashed = tape.tanh(cell_next);
    let hidden_next = tape.hadamard(o, squashed)?;
    Ok((hidden_next, cell_next))
}

/// Negativity estimate `[rows, 1]` from the hidden state.
pub fn negativity_head(tape: &mut Tape, p: &BoundParams, hidden: Var) -> Result<Var, AdError> {
    let [_, _, _, w1, b1, w2, b2, ..] = p.vars;
    let z = affine(tape, hidden, w1, b1)?;
    let a = tape.relu(z);
    affine(tape, a, w2, b2)
}

/// Raw proposal `[rows, 4·d]` from the hidden state.
pub fn proposal_head(tape: &mut Tape, p: &BoundParams, hidden: Var) -> Result<Var, AdError> {
    let [.., w1, b1, w2, b2] = p.vars;
    let z = affine(tape, hidden, w1, b1)?;
    let a = tape.relu(z);
    affine(tape, a, w2, b2)
}

/// Output of one recurrent step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub hidden: Tensor,
    pub cell: Tensor,
    pub estimate: Tensor,
    pub proposal: Tensor,
}

/// One full network step on plain tensors (rows are batch members).
pub fn step(params: &ModelParams, hidden: &Tensor, cell: &Tensor, input: &Tensor) -> Result<StepOutput, PolicyError> {
    let system = params.system;
    if input.cols() != input_width(system) {
        return Err(AdError::ShapeMismatch(format!(
            "step input width {} (expected {})",
            input.cols(),
            input_width(system)
        ))
        .into());
    }
    if hidden.cols() != HIDDEN || cell.cols() != HIDDEN || hidden.rows() != input.rows() || cell.rows() != input.rows()
    {
        return Err(AdError::ShapeMismatch(format!(
            "step state shapes {:?}/{:?} for input {:?}",
            hidden.shape(),
            cell.shape(),
            input.shape()
        ))
        .into());
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let h = tape.constant(hidden.clone());
    let c = tape.constant(cell.clone());
    let x = tape.constant(input.clone());
    let (h2, c2) = lstm_cell(&mut tape, &p, h, c, x)?;
    let est = negativity_head(&mut tape, &p, h2)?;
    let prop = proposal_head(&mut tape, &p, h2)?;
    Ok(StepOutput {
        hidden: tape.value(h2).clone(),
        cell: tape.value(c2).clone(),
        estimate: tape.value(est).clone(),
        proposal: tape.value(prop).clone(),
    })
}

/// One fixed measurement setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisPair {
    pub x: ProjectorParams,
    pub y: ProjectorParams,
}

/// Ordered fixed measurement settings for the non-adaptive mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisList {
    system: SystemKind,
    entries: Vec<BasisPair>,
}

impl BasisList {
    pub fn new(system: SystemKind, entries: Vec<BasisPair>) -> Result<Self, PolicyError> {
        let want = system.param_len();
        for (k, e) in entries.iter().enumerate() {
            if e.x.len() != want || e.y.len() != want {
                return Err(PolicyError::InvalidBasisList(format!(
                    "entry {k} has lengths {}/{}, expected {want}",
                    e.x.len(),
                    e.y.len()
                )));
            }
            if e.x.0.iter().chain(&e.y.0).any(|v| !v.is_finite()) {
                return Err(PolicyError::InvalidBasisList(format!("entry {k} is not finite")));
            }
        }
        Ok(Self { system, entries })
    }

    pub fn from_json(system: SystemKind, text: &str) -> Result<Self, PolicyError> {
        Self::new(system, serde_json::from_str(text)?)
    }

    pub fn load(system: SystemKind, path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(system, &fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("basis list serializes")
    }

    pub fn entries(&self) -> &[BasisPair] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn system(&self) -> SystemKind {
        self.system
    }

    /// Built-in ordering.
    ///
    /// Qubits: symmetric pairs of Pauli eigenstates, starting with the ten
    /// pairs over `{|0>, |+>, |+i>, |1>}` (these span the swap-symmetric
    /// operators on `B₁⊗B₂`), then the pairs involving `|->` and `|-i>`:
    /// `00, ++, (+i)(+i), 11, 0+, 0(+i), +(+i), 01, 1+, 1(+i), --, (-i)(-i),
    /// +-, (+i)(-i), 0-, 0(-i), 1-, 1(-i), +(-i), -(+i), -(-i)`.
    ///
    /// Qutrits: the nine states `|0>, |1>, |2>` and `(|j> + |k>)/√2`,
    /// `(|j> + i|k>)/√2` for `j < k`; first every state paired with itself,
    /// then all unordered distinct pairs in lexicographic order (45 total).
    pub fn default_for(system: SystemKind) -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let entries = match system {
            SystemKind::QubitQubit => {
                let zero = [c(1.0, 0.0), c(0.0, 0.0)];
                let one = [c(0.0, 0.0), c(1.0, 0.0)];
                let plus = [c(h, 0.0), c(h, 0.0)];
                let minus = [c(h, 0.0), c(-h, 0.0)];
                let plus_i = [c(h, 0.0), c(0.0, h)];
                let minus_i = [c(h, 0.0), c(0.0, -h)];
                let order: [(&[Complex64; 2], &[Complex64; 2]); 21] = [
                    (&zero, &zero),
                    (&plus, &plus),
                    (&plus_i, &plus_i),
                    (&one, &one),
                    (&zero, &plus),
                    (&zero, &plus_i),
                    (&plus, &plus_i),
                    (&zero, &one),
                    (&one, &plus),
                    (&one, &plus_i),
                    (&minus, &minus),
                    (&minus_i, &minus_i),
                    (&plus, &minus),
                    (&plus_i, &minus_i),
                    (&zero, &minus),
                    (&zero, &minus_i),
                    (&one, &minus),
                    (&one, &minus_i),
                    (&plus, &minus_i),
                    (&minus, &plus_i),
                    (&minus, &minus_i),
                ];
                order
                    .iter()
                    .map(|(a, b)| BasisPair {
                        x: ProjectorParams::from_amplitudes(&a[..]),
                        y: ProjectorParams::from_amplitudes(&b[..]),
                    })
                    .collect()
            }
            SystemKind::QubitQutrit => {
                let mut states: Vec<[Complex64; 3]> = (0..3)
                    .map(|k| {
                        let mut s = [c(0.0, 0.0); 3];
                        s[k] = c(1.0, 0.0);
                        s
                    })
                    .collect();
                for j in 0..3 {
                    for k in (j + 1)..3 {
                        for phase in [c(h, 0.0), c(0.0, h)] {
                            let mut s = [c(0.0, 0.0); 3];
                            s[j] = c(h, 0.0);
                            s[k] = phase;
                            states.push(s);
                        }
                    }
                }
                let mut pairs: Vec<(usize, usize)> = (0..states.len()).map(|a| (a, a)).collect();
                for a in 0..states.len() {
                    for b in (a + 1)..states.len() {
                        pairs.push((a, b));
                    }
                }
                pairs
                    .into_iter()
                    .map(|(a, b)| BasisPair {
                        x: ProjectorParams::from_amplitudes(&states[a]),
                        y: ProjectorParams::from_amplitudes(&states[b]),
                    })
                    .collect()
            }
        };
        Self { system, entries }
    }
}

/// How measurement settings after the first are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementMode {
    Adaptive,
    /// Iteration `i` (1-based) uses entry `i - 1`.
    Fixed(BasisList),
}

/// Which negativity estimates a rollout graph must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimates {
    Every,
    LastOnly,
}

/// Tape nodes of a batched rollout, one entry per iteration.
#[derive(Debug, Clone)]
pub struct RolloutGraph {
    pub probabilities: Vec<Var>,
    pub x_raw: Vec<Var>,
    pub y_raw: Vec<Var>,
    /// `None` for iterations skipped under [`Estimates::LastOnly`].
    pub estimates: Vec<Option<Var>>,
}

/// Checks `n` against the supported range for `system`.
pub fn validate_iterations(system: SystemKind, n: usize) -> Result<(), PolicyError> {
    let max = system.max_iterations();
    if n < 2 || n > max {
        return Err(PolicyError::BadIterationCount { n, max, system });
    }
    Ok(())
}

/// Checks a mode against an iteration count.
pub fn validate_mode(system: SystemKind, n: usize, mode: &MeasurementMode) -> Result<(), PolicyError> {
    if let MeasurementMode::Fixed(list) = mode {
        if list.system != system {
            return Err(PolicyError::InvalidBasisList(format!(
                "basis list is for {}, model is {system}",
                list.system
            )));
        }
        if list.len() < n {
            return Err(PolicyError::BasisListTooShort {
                needed: n,
                got: list.len(),
            });
        }
    }
    Ok(())
}

fn repeated_row(rows: usize, row: &[f64]) -> Tensor {
    let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
    Tensor::matrix(rows, row.len(), data).expect("consistent shape")
}

/// Records an `n`-iteration rollout over a batch of effective operators.
pub fn rollout_graph(
    tape: &mut Tape,
    params: &BoundParams,
    operators: &[&EffectiveOperator],
    n: usize,
    mode: &MeasurementMode,
    estimates: Estimates,
) -> Result<RolloutGraph, PolicyError> {
    let system = params.system;
    validate_iterations(system, n)?;
    validate_mode(system, n, mode)?;
    if let Some(op) = operators.iter().find(|op| op.system() != system) {
        return Err(PolicyError::ArchitectureMismatch(format!(
            "state of kind {} fed to a {system} model",
            op.system()
        )));
    }
    let rows = operators.len();
    let d2 = system.param_len();

    let mut hidden = tape.constant(Tensor::zeros(&[rows, HIDDEN]));
    let mut cell = tape.constant(Tensor::zeros(&[rows, HIDDEN]));
    let ground = ProjectorParams::basis(system.local_dim(), 0);
    let mut x = tape.constant(repeated_row(rows, &ground.0));
    let mut y = tape.constant(repeated_row(rows, &ground.0));

    let mut graph = RolloutGraph {
        probabilities: Vec::with_capacity(n),
        x_raw: Vec::with_capacity(n),
        y_raw: Vec::with_capacity(n),
        estimates: Vec::with_capacity(n),
    };
    for i in 0..n {
        if let MeasurementMode::Fixed(list) = mode {
            let pair = &list.entries[i];
            x = tape.constant(repeated_row(rows, &pair.x.0));
            y = tape.constant(repeated_row(rows, &pair.y.0));
        }
        let p = tape.measure_prob(x, y, operators)?;
        let p_feat = tape.scale(p, probability_feature_scale(system));
        let xn = tape.complex_normalize(x)?;
        let yn = tape.complex_normalize(y)?;
        let input = tape.concat(&[p_feat, xn, yn])?;
        let (h2, c2) = lstm_cell(tape, params, hidden, cell, input)?;
        hidden = h2;
        cell = c2;

        let last = i + 1 == n;
        let est = if estimates == Estimates::Every || last {
            Some(negativity_head(tape, params, hidden)?)
        } else {
            None
        };
        graph.probabilities.push(p);
        graph.x_raw.push(x);
        graph.y_raw.push(y);
        graph.estimates.push(est);

        if !last && *mode == MeasurementMode::Adaptive {
            let prop = proposal_head(tape, params, hidden)?;
            x = tape.slice(prop, 0, d2)?;
            y = tape.slice(prop, d2, 2 * d2)?;
        }
    }
    Ok(graph)
}

/// Per-state record of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub probabilities: Vec<f64>,
    pub x: Vec<ProjectorParams>,
    pub y: Vec<ProjectorParams>,
    /// Raw (unclamped) estimates `N̂_1..N̂_n`.
    pub estimates: Vec<f64>,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    /// Final estimate clamped to the physical range, as used for evaluation.
    pub fn final_estimate_clamped(&self) -> f64 {
        clamp_estimate(*self.estimates.last().expect("nonempty rollout"))
    }
}

/// Evaluation-time clamp onto `[0, 0.5]`.
pub fn clamp_estimate(x: f64) -> f64 {
    x.clamp(0.0, 0.5)
}

/// Forward-only rollout over precomputed effective operators.
pub fn rollout_operators(
    params: &ModelParams,
    operators: &[&EffectiveOperator],
    n: usize,
    mode: &MeasurementMode,
) -> Result<Vec<RolloutRecord>, PolicyError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let g = rollout_graph(&mut tape, &bound, operators, n, mode, Estimates::Every)?;
    let records = (0..operators.len())
        .map(|r| RolloutRecord {
            probabilities: g.probabilities.iter().map(|&v| tape.value(v).data()[r]).collect(),
            x: g.x_raw.iter().map(|&v| ProjectorParams(tape.value(v).row(r).to_vec())).collect(),
            y: g.y_raw.iter().map(|&v| ProjectorParams(tape.value(v).row(r).to_vec())).collect(),
            estimates: g
                .estimates
                .iter()
                .map(|v| tape.value(v.expect("every estimate recorded")).data()[r])
                .collect(),
        })
        .collect();
    Ok(records)
}

/// Forward-only rollout over a batch of density matrices.
pub fn rollout(
    params: &ModelParams,
    states: &[DensityMatrix],
    n: usize,
    mode: &MeasurementMode,
) -> Result<Vec<RolloutRecord>, PolicyError> {
    let ops: Vec<EffectiveOperator> = states.iter().map(build_effective_operator).collect();
    let refs: Vec<&EffectiveOperator> = ops.iter().collect();
    rollout_operators(params, &refs, n, mode)
}
