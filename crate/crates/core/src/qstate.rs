//! Quantum states and the two-copy collective measurement.
//!
//! A state `ρ` lives on `A ⊗ B` where `A` is always a qubit and `B` is a
//! qubit or a qutrit. Two copies are arranged as `(B₁, A₁, A₂, B₂)`: the
//! first copy is swapped so that both `A` subsystems sit next to each other
//! and can be projected onto the singlet, while local rank-1 projectors act
//! on `B₁` and `B₂`.
//!
//! The measurement probability is
//! `P = Tr[Ω (Π_x ⊗ Π_Bell ⊗ Π_y)]`, which equals `(x⊗y)^H M (x⊗y)` for the
//! effective operator `M` obtained by contracting `Ω` with the singlet.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{self, kron, CMatrix, NumError};
use crate::rng::SeededStream;

/// Validation tolerance for density matrices and effective operators.
pub const STATE_TOL: f64 = 1e-10;
/// Raw projector parameters with a smaller norm decode to `|0>`.
pub const ZERO_NORM: f64 = 1e-12;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid density matrix: {0}")]
    InvalidDensityMatrix(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemKind {
    #[serde(rename = "qubit-qubit")]
    QubitQubit,
    #[serde(rename = "qubit-qutrit")]
    QubitQutrit,
}

impl SystemKind {
    /// Dimension of the Bell-measured subsystem `A`.
    pub const fn bell_dim(self) -> usize {
        2
    }

    /// Dimension of the locally measured subsystem `B`.
    pub const fn local_dim(self) -> usize {
        match self {
            SystemKind::QubitQubit => 2,
            SystemKind::QubitQutrit => 3,
        }
    }

    pub const fn total_dim(self) -> usize {
        self.bell_dim() * self.local_dim()
    }

    pub const fn two_copy_dim(self) -> usize {
        self.total_dim() * self.total_dim()
    }

    /// Length of a raw projector parameter vector.
    pub const fn param_len(self) -> usize {
        2 * self.local_dim()
    }

    /// Largest supported iteration count.
    pub const fn max_iterations(self) -> usize {
        match self {
            SystemKind::QubitQubit => 10,
            SystemKind::QubitQutrit => 21,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            SystemKind::QubitQubit => "qubit-qubit",
            SystemKind::QubitQutrit => "qubit-qutrit",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qubit-qubit" => Ok(SystemKind::QubitQubit),
            "qubit-qutrit" => Ok(SystemKind::QubitQutrit),
            other => Err(format!(
                "unknown system '{other}' (expected qubit-qubit or qubit-qutrit)"
            )),
        }
    }
}

/// A validated density matrix on `A ⊗ B`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    system: SystemKind,
    mat: CMatrix,
}

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positivity (all within [`STATE_TOL`]).
    pub fn new(system: SystemKind, mat: CMatrix) -> Result<Self, StateError> {
        let d = system.total_dim();
        if mat.rows() != d || mat.cols() != d {
            return Err(StateError::DimensionMismatch {
                expected: d,
                got: mat.rows(),
            });
        }
        let dev = mat.hermitian_deviation();
        if dev > STATE_TOL {
            return Err(StateError::InvalidDensityMatrix(format!(
                "not Hermitian (deviation {dev:e})"
            )));
        }
        let tr = mat.trace();
        if (tr.re - 1.0).abs() > STATE_TOL || tr.im.abs() > STATE_TOL {
            return Err(StateError::InvalidDensityMatrix(format!("trace {tr}")));
        }
        let min = numkit::eig_hermitian(&mat)?[0];
        if min < -STATE_TOL {
            return Err(StateError::InvalidDensityMatrix(format!(
                "negative eigenvalue {min:e}"
            )));
        }
        Ok(Self { system, mat })
    }

    pub fn system(&self) -> SystemKind {
        self.system
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    /// `I / d`.
    pub fn maximally_mixed(system: SystemKind) -> Self {
        let d = system.total_dim();
        Self {
            system,
            mat: CMatrix::identity(d).scale(Complex64::new(1.0 / d as f64, 0.0)),
        }
    }

    /// The two-qubit singlet `|Ψ⁻><Ψ⁻|`.
    pub fn singlet() -> Self {
        Self {
            system: SystemKind::QubitQubit,
            mat: bell_projector(),
        }
    }

    /// Werner state `p |Ψ⁻><Ψ⁻| + (1 - p) I/4`, `p ∈ [0, 1]`.
    pub fn werner(p: f64) -> Self {
        let mixed = CMatrix::identity(4).scale(Complex64::new((1.0 - p) / 4.0, 0.0));
        Self {
            system: SystemKind::QubitQubit,
            mat: bell_projector().scale(Complex64::new(p, 0.0)).add(&mixed),
        }
    }

    /// `ρ_A ⊗ ρ_B` for a qubit `ρ_A` and a `ρ_B` of the system's local dimension.
    pub fn product(system: SystemKind, rho_a: &CMatrix, rho_b: &CMatrix) -> Result<Self, StateError> {
        if rho_a.rows() != system.bell_dim() {
            return Err(StateError::DimensionMismatch {
                expected: system.bell_dim(),
                got: rho_a.rows(),
            });
        }
        if rho_b.rows() != system.local_dim() {
            return Err(StateError::DimensionMismatch {
                expected: system.local_dim(),
                got: rho_b.rows(),
            });
        }
        Self::new(system, kron(rho_a, rho_b))
    }
}

/// Raw real parameters of a local projector: interleaved `(re, im)` amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProjectorParams(pub Vec<f64>);

impl ProjectorParams {
    /// Parameters of the computational basis state `|k>` in dimension `dim`.
    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = vec![0.0; 2 * dim];
        v[2 * k] = 1.0;
        Self(v)
    }

    pub fn from_amplitudes(amps: &[Complex64]) -> Self {
        Self(amps.iter().flat_map(|z| [z.re, z.im]).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Normalized complex amplitudes; a zero-norm input decodes to `|0>`.
    pub fn decode(&self) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.0.len() / 2];
        decode_into(&self.0, &mut out);
        out
    }

    fn check(&self, system: SystemKind) -> Result<(), StateError> {
        if self.0.len() != system.param_len() {
            return Err(StateError::DimensionMismatch {
                expected: system.param_len(),
                got: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Decodes raw interleaved reals into unit amplitudes; returns the raw norm.
fn decode_into(raw: &[f64], out: &mut [Complex64]) -> f64 {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < ZERO_NORM {
        out.iter_mut().for_each(|z| *z = ZERO);
        out[0] = ONE;
    } else {
        for (z, pair) in out.iter_mut().zip(raw.chunks_exact(2)) {
            *z = Complex64::new(pair[0] / norm, pair[1] / norm);
        }
    }
    norm
}

/// Bell-contracted two-copy operator on `B₁ ⊗ B₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveOperator {
    system: SystemKind,
    mat: CMatrix,
}

impl EffectiveOperator {
    pub fn system(&self) -> SystemKind {
        self.system
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    /// Probability and, when `grads` is given, its gradient with respect to
    /// the raw parameters. Slices must have length `2 * local_dim`.
    pub fn evaluate(&self, x_raw: &[f64], y_raw: &[f64], grads: Option<(&mut [f64], &mut [f64])>) -> f64 {
        let d = self.system.local_dim();
        debug_assert_eq!(x_raw.len(), 2 * d);
        debug_assert_eq!(y_raw.len(), 2 * d);
        let mut x = [ZERO; 3];
        let mut y = [ZERO; 3];
        let nx = decode_into(x_raw, &mut x[..d]);
        let ny = decode_into(y_raw, &mut y[..d]);

        let dd = d * d;
        let mut v = [ZERO; 9];
        for i in 0..d {
            for j in 0..d {
                v[i * d + j] = x[i] * y[j];
            }
        }
        let m = self.mat.as_slice();
        let mut w = [ZERO; 9];
        for r in 0..dd {
            let row = &m[r * dd..(r + 1) * dd];
            w[r] = row.iter().zip(&v[..dd]).map(|(a, b)| a * b).sum();
        }
        let p: f64 = v[..dd].iter().zip(&w[..dd]).map(|(a, b)| (a.conj() * b).re).sum();

        if let Some((gx, gy)) = grads {
            // dP/dx̂ = 2 (A_y x̂) with A_y x̂ = Σ_j conj(y_j) w_(i,j); likewise for y.
            let mut ax = [ZERO; 3];
            let mut ay = [ZERO; 3];
            for i in 0..d {
                for j in 0..d {
                    ax[i] += y[j].conj() * w[i * d + j];
                    ay[j] += x[i].conj() * w[i * d + j];
                }
            }
            project_gradient(&ax[..d], &x[..d], nx, gx);
            project_gradient(&ay[..d], &y[..d], ny, gy);
        }
        p
    }
}

/// Chains `2 (A u)` through the normalization `u = r / |r|`.
fn project_gradient(au: &[Complex64], unit: &[Complex64], raw_norm: f64, out: &mut [f64]) {
    if raw_norm < ZERO_NORM {
        out.iter_mut().for_each(|g| *g = 0.0);
        return;
    }
    let radial: f64 = au
        .iter()
        .zip(unit)
        .map(|(a, u)| 2.0 * (a.re * u.re + a.im * u.im))
        .sum();
    for (k, (a, u)) in au.iter().zip(unit).enumerate() {
        out[2 * k] = (2.0 * a.re - radial * u.re) / raw_norm;
        out[2 * k + 1] = (2.0 * a.im - radial * u.im) / raw_norm;
    }
}

/// A density matrix together with its exact negativity.
#[derive(Debug, Clone)]
pub struct LabeledState {
    pub rho: DensityMatrix,
    pub negativity: f64,
    pub seed_tag: u64,
}

impl LabeledState {
    pub fn generate(system: SystemKind, seed: u64, index: u64) -> Result<Self, StateError> {
        let rho = random_density_matrix_at(system, seed, index);
        let negativity = negativity(&rho)?;
        Ok(Self {
            rho,
            negativity,
            seed_tag: index,
        })
    }
}

/// Hilbert–Schmidt random state for `seed` (stream 0).
pub fn random_density_matrix(system: SystemKind, seed: u64) -> DensityMatrix {
    random_density_matrix_at(system, seed, 0)
}

/// Hilbert–Schmidt random state number `index` of the dataset keyed by `seed`.
///
/// Draws a `d × d` Ginibre matrix `G` (row-major, one Box–Muller pair per
/// entry giving its real and imaginary part) and returns `G G^H / Tr(G G^H)`.
pub fn random_density_matrix_at(system: SystemKind, seed: u64, index: u64) -> DensityMatrix {
    let d = system.total_dim();
    let mut rng = SeededStream::new(seed, index);
    let g = CMatrix::from_fn(d, d, |_, _| {
        let (re, im) = rng.gaussian_pair();
        Complex64::new(re, im)
    });
    let mut gg = g.matmul(&g.adjoint());
    let tr = gg.trace().re;
    gg = gg.scale(Complex64::new(1.0 / tr, 0.0));
    // Exact Hermiticity and a real diagonal.
    let mat = CMatrix::from_fn(d, d, |i, j| {
        if i == j {
            Complex64::new(gg[(i, i)].re, 0.0)
        } else if i < j {
            gg[(i, j)]
        } else {
            gg[(j, i)].conj()
        }
    });
    DensityMatrix { system, mat }
}

/// Partial transpose over subsystem `B`.
pub fn partial_transpose(rho: &DensityMatrix) -> CMatrix {
    let da = rho.system.bell_dim();
    let db = rho.system.local_dim();
    let m = &rho.mat;
    let mut out = CMatrix::zeros(da * db, da * db);
    for a in 0..da {
        for b in 0..db {
            for a2 in 0..da {
                for b2 in 0..db {
                    out[(a * db + b2, a2 * db + b)] = m[(a * db + b, a2 * db + b2)];
                }
            }
        }
    }
    out
}

/// `|Σ λ_j|` over the strictly negative eigenvalues of the partial transpose.
pub fn negativity(rho: &DensityMatrix) -> Result<f64, StateError> {
    let ev = numkit::eig_hermitian(&partial_transpose(rho))?;
    Ok(ev.iter().filter(|&&l| l < 0.0).sum::<f64>().abs())
}

/// The subsystem swap `S` with `S |a⟩|b⟩ = |b⟩|a⟩`, mapping `A⊗B` to `B⊗A`.
pub fn swap_operator(system: SystemKind) -> CMatrix {
    let da = system.bell_dim();
    let db = system.local_dim();
    let mut s = CMatrix::zeros(da * db, da * db);
    for a in 0..da {
        for b in 0..db {
            s[(b * da + a, a * db + b)] = ONE;
        }
    }
    s
}

/// `ρ_AB -> ρ_BA` by index permutation.
pub fn swap_subsystems(rho: &DensityMatrix) -> CMatrix {
    let da = rho.system.bell_dim();
    let db = rho.system.local_dim();
    let m = &rho.mat;
    let mut out = CMatrix::zeros(da * db, da * db);
    for a in 0..da {
        for b in 0..db {
            for a2 in 0..da {
                for b2 in 0..db {
                    out[(b * da + a, b2 * da + a2)] = m[(a * db + b, a2 * db + b2)];
                }
            }
        }
    }
    out
}

/// Two-copy state `ρ_BA ⊗ ρ_AB` in `(B₁, A₁, A₂, B₂)` order.
pub fn build_two_copy(rho: &DensityMatrix) -> CMatrix {
    kron(&swap_subsystems(rho), &rho.mat)
}

/// Singlet amplitudes `(|01⟩ - |10⟩)/√2` in the `|a₁ a₂⟩` basis.
pub fn singlet_vector() -> [Complex64; 4] {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    [ZERO, Complex64::new(h, 0.0), Complex64::new(-h, 0.0), ZERO]
}

/// `|Ψ⁻⟩⟨Ψ⁻|` on two qubits.
pub fn bell_projector() -> CMatrix {
    CMatrix::outer(&singlet_vector())
}

/// Contracts `Ω` with the singlet on `(A₁, A₂)`:
/// `M[(i,j),(i',j')] = Σ conj(Ψ_ab) Ω[(i,a,b,j),(i',a',b',j')] Ψ_a'b'`.
pub fn build_effective_operator(rho: &DensityMatrix) -> EffectiveOperator {
    let system = rho.system;
    let db = system.local_dim();
    let omega = build_two_copy(rho);
    let psi = singlet_vector();
    // Row index of (i, a, b, j) in (B₁, A₁, A₂, B₂) order.
    let idx = |i: usize, ab: usize, j: usize| (i * 4 + ab) * db + j;
    let dd = db * db;
    let mut mat = CMatrix::zeros(dd, dd);
    for i in 0..db {
        for j in 0..db {
            for i2 in 0..db {
                for j2 in 0..db {
                    let mut acc = ZERO;
                    for (ab, pa) in psi.iter().enumerate() {
                        if *pa == ZERO {
                            continue;
                        }
                        for (ab2, pb) in psi.iter().enumerate() {
                            if *pb == ZERO {
                                continue;
                            }
                            acc += pa.conj() * omega[(idx(i, ab, j), idx(i2, ab2, j2))] * pb;
                        }
                    }
                    mat[(i * db + j, i2 * db + j2)] = acc;
                }
            }
        }
    }
    EffectiveOperator { system, mat }
}

/// `P = (x⊗y)^H M (x⊗y)` for decoded `x`, `y`.
pub fn collective_probability(
    m: &EffectiveOperator,
    x: &ProjectorParams,
    y: &ProjectorParams,
) -> Result<f64, StateError> {
    x.check(m.system)?;
    y.check(m.system)?;
    Ok(m.evaluate(&x.0, &y.0, None))
}

/// Gradient of [`collective_probability`] with respect to the raw parameters,
/// normalization included.
pub fn probability_gradient(
    m: &EffectiveOperator,
    x: &ProjectorParams,
    y: &ProjectorParams,
) -> Result<(Vec<f64>, Vec<f64>), StateError> {
    x.check(m.system)?;
    y.check(m.system)?;
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; y.len()];
    m.evaluate(&x.0, &y.0, Some((&mut gx, &mut gy)));
    Ok((gx, gy))
}

/// The literal trace `Tr[Ω (Π_x ⊗ Π_Bell ⊗ Π_y)]` over the full two-copy space.
pub fn dense_collective_probability(
    omega: &CMatrix,
    system: SystemKind,
    x: &ProjectorParams,
    y: &ProjectorParams,
) -> Result<f64, StateError> {
    x.check(system)?;
    y.check(system)?;
    if omega.rows() != system.two_copy_dim() {
        return Err(StateError::DimensionMismatch {
            expected: system.two_copy_dim(),
            got: omega.rows(),
        });
    }
    let pi_x = CMatrix::outer(&x.decode());
    let pi_y = CMatrix::outer(&y.decode());
    let measurement = kron(&kron(&pi_x, &bell_projector()), &pi_y);
    Ok(omega.matmul(&measurement).trace().re)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_params(rng: &mut SeededStream, len: usize) -> ProjectorParams {
        ProjectorParams((0..len).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
    }

    fn random_qubit_state(rng: &mut SeededStream, dim: usize) -> CMatrix {
        let seed = rng.next_u64();
        let system = if dim == 2 {
            SystemKind::QubitQubit
        } else {
            SystemKind::QubitQutrit
        };
        // Reduce a random bipartite state to get a valid local density matrix.
        let rho = random_density_matrix(system, seed);
        let db = system.local_dim();
        if dim == 2 {
            CMatrix::from_fn(2, 2, |a, a2| (0..db).map(|b| rho.mat[(a * db + b, a2 * db + b)]).sum())
        } else {
            CMatrix::from_fn(3, 3, |b, b2| (0..2).map(|a| rho.mat[(a * db + b, a * db + b2)]).sum())
        }
    }

    #[test]
    fn random_state_is_valid_and_deterministic() {
        for system in [SystemKind::QubitQubit, SystemKind::QubitQutrit] {
            for seed in 0..20 {
                let rho = random_density_matrix(system, seed);
                assert!((rho.mat.trace().re - 1.0).abs() < 1e-12);
                let ev = numkit::eig_hermitian(&rho.mat).unwrap();
                assert!(ev[0] >= -1e-12);
                assert!(DensityMatrix::new(system, rho.mat.clone()).is_ok());
                let again = random_density_matrix(system, seed);
                let bits = |m: &CMatrix| -> Vec<u64> {
                    m.as_slice().iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()]).collect()
                };
                assert_eq!(bits(&rho.mat), bits(&again.mat));
            }
        }
    }

    #[test]
    fn partial_transpose_is_an_involution() {
        let rho = random_density_matrix(SystemKind::QubitQutrit, 3);
        let once = DensityMatrix {
            system: rho.system,
            mat: partial_transpose(&rho),
        };
        assert_eq!(partial_transpose(&once), rho.mat);
    }

    #[test]
    fn partial_transpose_of_product() {
        let mut rng = SeededStream::new(4, 0);
        let ra = random_qubit_state(&mut rng, 2);
        let rb = random_qubit_state(&mut rng, 3);
        let rho = DensityMatrix::product(SystemKind::QubitQutrit, &ra, &rb).unwrap();
        let expected = kron(&ra, &rb.transpose());
        assert!(partial_transpose(&rho).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn singlet_partial_transpose_spectrum() {
        let ev = numkit::eig_hermitian(&partial_transpose(&DensityMatrix::singlet())).unwrap();
        let expected = [-0.5, 0.5, 0.5, 0.5];
        for (a, b) in ev.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((negativity(&DensityMatrix::singlet()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn werner_negativity_closed_form() {
        for p in [0.0, 0.1, 1.0 / 3.0, 0.5, 0.8, 1.0] {
            let n = negativity(&DensityMatrix::werner(p)).unwrap();
            let expected = f64::max(0.0, (3.0 * p - 1.0) / 4.0);
            assert!((n - expected).abs() < 1e-10, "p={p}: {n} vs {expected}");
        }
        assert!((negativity(&DensityMatrix::werner(0.5)).unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn product_states_have_zero_negativity() {
        let mut rng = SeededStream::new(5, 0);
        for _ in 0..20 {
            let ra = random_qubit_state(&mut rng, 2);
            let rb = random_qubit_state(&mut rng, 3);
            let rho = DensityMatrix::product(SystemKind::QubitQutrit, &ra, &rb).unwrap();
            assert!(negativity(&rho).unwrap() < 1e-12);
        }
    }

    #[test]
    fn random_negativity_in_range() {
        for system in [SystemKind::QubitQubit, SystemKind::QubitQutrit] {
            for seed in 0..200 {
                let n = negativity(&random_density_matrix(system, seed)).unwrap();
                assert!((0.0..=0.5).contains(&n));
            }
        }
    }

    #[test]
    fn two_copy_of_maximally_mixed() {
        let omega = build_two_copy(&DensityMatrix::maximally_mixed(SystemKind::QubitQubit));
        let expected = CMatrix::identity(16).scale(c(1.0 / 16.0, 0.0));
        assert!(omega.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn two_copy_matches_explicit_swap() {
        for system in [SystemKind::QubitQubit, SystemKind::QubitQutrit] {
            let rho = random_density_matrix(system, 8);
            let s = swap_operator(system);
            // S maps A⊗B to B⊗A, so ρ_BA = S ρ S^T.
            let swapped = s.matmul(&rho.mat).matmul(&s.transpose());
            assert_eq!(swapped, swap_subsystems(&rho));
            let omega = build_two_copy(&rho);
            assert!(omega.max_abs_diff(&kron(&swapped, &rho.mat)) < 1e-15);
            assert!((omega.trace().re - 1.0).abs() < 1e-12);
            assert!(omega.hermitian_deviation() < 1e-15);
        }
    }

    #[test]
    fn two_copy_of_singlet() {
        let omega = build_two_copy(&DensityMatrix::singlet());
        let pi = bell_projector();
        assert!(omega.max_abs_diff(&kron(&pi, &pi)) < 1e-15);
    }

    #[test]
    fn two_copy_trace_many_states() {
        for seed in 0..1000 {
            let omega = build_two_copy(&random_density_matrix(SystemKind::QubitQubit, seed));
            assert!((omega.trace().re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bell_projector_properties() {
        let pi = bell_projector();
        assert!(pi.matmul(&pi).max_abs_diff(&pi) < 1e-15);
        assert!((pi.trace().re - 1.0).abs() < 1e-15);
        assert_eq!(pi[(3, 3)], ZERO);
        assert_eq!(numkit::eig_hermitian(&pi).unwrap().iter().filter(|&&l| l > 0.5).count(), 1);
    }

    #[test]
    fn effective_operator_of_maximally_mixed() {
        let m = build_effective_operator(&DensityMatrix::maximally_mixed(SystemKind::QubitQubit));
        let expected = CMatrix::identity(4).scale(c(1.0 / 16.0, 0.0));
        assert!(m.matrix().max_abs_diff(&expected) < 1e-15);
        let qt = build_effective_operator(&random_density_matrix(SystemKind::QubitQutrit, 1));
        assert_eq!((qt.matrix().rows(), qt.matrix().cols()), (9, 9));
    }

    #[test]
    fn effective_operator_is_hermitian_psd() {
        for system in [SystemKind::QubitQubit, SystemKind::QubitQutrit] {
            for seed in 0..50 {
                let m = build_effective_operator(&random_density_matrix(system, seed));
                assert!(m.matrix().hermitian_deviation() < 1e-12);
                let ev = numkit::eig_hermitian(m.matrix()).unwrap();
                assert!(ev[0] > -1e-12);
                assert!(m.matrix().trace().re <= 1.0 + 1e-10);
            }
        }
    }

    #[test]
    fn effective_path_matches_dense_trace() {
        let mut rng = SeededStream::new(99, 0);
        for system in [SystemKind::QubitQubit, SystemKind::QubitQutrit] {
            let mut worst: f64 = 0.0;
            for seed in 0..200 {
                let rho = random_density_matrix(system, seed);
                let m = build_effective_operator(&rho);
                let omega = build_two_copy(&rho);
                let x = random_params(&mut rng, system.param_len());
                let y = random_params(&mut rng, system.param_len());
                let fast = collective_probability(&m, &x, &y).unwrap();
                let dense = dense_collective_probability(&omega, system, &x, &y).unwrap();
                worst = worst.max((fast - dense).abs());
            }
            assert!(worst < 1e-12, "{system}: {worst:e}");
        }
    }

    #[test]
    fn probability_reference_values() {
        let z = ProjectorParams::basis(2, 0);
        let one = ProjectorParams::basis(2, 1);
        let mixed = build_effective_operator(&DensityMatrix::maximally_mixed(SystemKind::QubitQubit));
        let mut rng = SeededStream::new(3, 3);
        for _ in 0..10 {
            let x = random_params(&mut rng, 4);
            let y = random_params(&mut rng, 4);
            assert!((collective_probability(&mixed, &x, &y).unwrap() - 0.0625).abs() < 1e-15);
        }
        let singlet = build_effective_operator(&DensityMatrix::singlet());
        assert!(collective_probability(&singlet, &z, &z).unwrap().abs() < 1e-15);
        assert!((collective_probability(&singlet, &z, &one).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn probability_rejects_wrong_length() {
        let m = build_effective_operator(&DensityMatrix::singlet());
        let bad = ProjectorParams(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let ok = ProjectorParams::basis(2, 0);
        assert!(matches!(
            collective_probability(&m, &bad, &ok),
            Err(StateError::DimensionMismatch { expected: 4, got: 6 })
        ));
        assert!(probability_gradient(&m, &ok, &bad).is_err());
    }

    #[test]
    fn orthonormal_basis_sum_bounded() {
        for seed in 0..50 {
            let rho = random_density_matrix(SystemKind::QubitQutrit, seed);
            let m = build_effective_operator(&rho);
            let mut total = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let p = collective_probability(&m, &ProjectorParams::basis(3, i), &ProjectorParams::basis(3, j))
                        .unwrap();
                    assert!((-1e-15..=1.0).contains(&p));
                    total += p;
                }
            }
            assert!(total <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn gradient_vanishes_for_constant_probability() {
        let m = build_effective_operator(&DensityMatrix::maximally_mixed(SystemKind::QubitQubit));
        let mut rng = SeededStream::new(6, 0);
        let x = random_params(&mut rng, 4);
        let y = random_params(&mut rng, 4);
        let (gx, gy) = probability_gradient(&m, &x, &y).unwrap();
        assert!(gx.iter().chain(&gy).all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-5;
        let mut rng = SeededStream::new(7, 0);
        for system in [SystemKind::QubitQubit, SystemKind::QubitQutrit] {
            for seed in 0..10 {
                let m = build_effective_operator(&random_density_matrix(system, seed));
                let x = random_params(&mut rng, system.param_len());
                let y = random_params(&mut rng, system.param_len());
                let (gx, gy) = probability_gradient(&m, &x, &y).unwrap();
                let fd = |which: usize, k: usize| {
                    let (mut xp, mut xm, mut yp, mut ym) = (x.clone(), x.clone(), y.clone(), y.clone());
                    if which == 0 {
                        xp.0[k] += h;
                        xm.0[k] -= h;
                    } else {
                        yp.0[k] += h;
                        ym.0[k] -= h;
                    }
                    (collective_probability(&m, &xp, &yp).unwrap() - collective_probability(&m, &xm, &ym).unwrap())
                        / (2.0 * h)
                };
                let analytic: Vec<f64> = gx.iter().chain(&gy).copied().collect();
                let numeric: Vec<f64> = (0..x.len())
                    .map(|k| fd(0, k))
                    .chain((0..y.len()).map(|k| fd(1, k)))
                    .collect();
                let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let scale = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
                assert!(diff / scale < 1e-6, "{system} seed {seed}: rel err {:e}", diff / scale);
            }
        }
    }

    #[test]
    fn gradient_scales_inversely_with_raw_norm() {
        let m = build_effective_operator(&random_density_matrix(SystemKind::QubitQubit, 12));
        let mut rng = SeededStream::new(8, 0);
        let x = random_params(&mut rng, 4);
        let y = random_params(&mut rng, 4);
        let x2 = ProjectorParams(x.0.iter().map(|v| 2.0 * v).collect());
        let (g1, _) = probability_gradient(&m, &x, &y).unwrap();
        let (g2, _) = probability_gradient(&m, &x2, &y).unwrap();
        // Same direction, half the magnitude; radial component stays zero.
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        let radial: f64 = g1.iter().zip(&x.0).map(|(g, v)| g * v).sum();
        assert!(radial.abs() < 1e-12);
    }

    #[test]
    fn zero_params_decode_to_ground_state() {
        let p = ProjectorParams(vec![0.0; 6]);
        assert_eq!(p.decode(), vec![ONE, ZERO, ZERO]);
        let amps = ProjectorParams(vec![0.0, 3.0, 4.0, 0.0]).decode();
        assert!((amps[0] - c(0.0, 0.6)).norm() < 1e-15 && (amps[1] - c(0.8, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn system_kind_parsing() {
        assert_eq!("qubit-qutrit".parse::<SystemKind>().unwrap(), SystemKind::QubitQutrit);
        assert!("qutrit".parse::<SystemKind>().is_err());
        assert_eq!(SystemKind::QubitQutrit.two_copy_dim(), 36);
        assert_eq!(serde_json::to_string(&SystemKind::QubitQubit).unwrap(), "\"qubit-qubit\"");
    }

    #[test]
    fn density_matrix_validation() {
        let bad = CMatrix::identity(4);
        assert!(matches!(
            DensityMatrix::new(SystemKind::QubitQubit, bad),
            Err(StateError::InvalidDensityMatrix(_))
        ));
        assert!(DensityMatrix::new(SystemKind::QubitQutrit, CMatrix::identity(4)).is_err());
    }
}
