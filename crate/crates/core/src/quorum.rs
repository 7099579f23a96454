//! Tomographer observables.
//!
//! Finite quorums are families of orthonormal eigenbases; their projectors
//! form an operator frame whose canonical dual lets any operator be expanded
//! as `X = Σ_j Tr[X C_j†] E_j`. The homodyne quorum measures rotated
//! quadratures with efficiency `η_h`; for photon-number-diagonal estimation
//! the phase is irrelevant and the tomographer reduces to the smeared Fock
//! densities `q_m(x)` together with kernels `K_m` that invert them.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmath::{binomial_pmf, fock_quadrature_amplitudes, matrix_rank, pseudo_inverse, ComplexOperator, C64};

const ORTHONORMAL_TOL: f64 = 1e-10;
const RANK_TOL: f64 = 1e-10;

/// A finite quorum: one orthonormal eigenbasis per setting.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteQuorum {
    pub dim: usize,
    pub settings: Vec<Vec<DVector<C64>>>,
    /// Whether the projector family spans the full operator space.
    pub span_check: bool,
}

impl FiniteQuorum {
    pub fn new(settings: Vec<Vec<DVector<C64>>>) -> Result<Self> {
        let dim = settings
            .first()
            .and_then(|s| s.first())
            .map(|v| v.len())
            .ok_or_else(|| Error::Validation("quorum needs at least one setting".into()))?;
        for (k, basis) in settings.iter().enumerate() {
            if basis.len() != dim || basis.iter().any(|v| v.len() != dim) {
                return Err(Error::Validation(format!("setting {k} is not a basis of C^{dim}")));
            }
            for (i, a) in basis.iter().enumerate() {
                for (j, b) in basis.iter().enumerate() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    let dev = (a.dotc(b) - C64::new(target, 0.0)).norm();
                    if dev >= ORTHONORMAL_TOL {
                        return Err(Error::Validation(format!(
                            "setting {k} is not orthonormal (deviation {dev:e})"
                        )));
                    }
                }
            }
        }
        let mut q = Self { dim, settings, span_check: false };
        q.span_check = projector_rank(&q.projectors()) == dim * dim;
        Ok(q)
    }

    pub fn n_settings(&self) -> usize {
        self.settings.len()
    }

    /// Number of (setting, outcome) pairs.
    pub fn n_projectors(&self) -> usize {
        self.settings.iter().map(Vec::len).sum()
    }

    /// Flat index of projector `(k, m)`.
    pub fn projector_index(&self, k: usize, m: usize) -> usize {
        self.settings[..k].iter().map(Vec::len).sum::<usize>() + m
    }

    /// `|b^{(k)}_m⟩⟨b^{(k)}_m|` in flat `(k, m)` order.
    pub fn projectors(&self) -> Vec<ComplexOperator> {
        self.settings.iter().flatten().map(ComplexOperator::projector).collect()
    }
}

fn projector_rank(ops: &[ComplexOperator]) -> usize {
    if ops.is_empty() {
        return 0;
    }
    let d2 = ops[0].dim() * ops[0].dim();
    let mut stacked = DMatrix::<C64>::zeros(d2, ops.len());
    for (j, op) in ops.iter().enumerate() {
        stacked.set_column(j, &op.vectorize());
    }
    matrix_rank(&stacked, RANK_TOL)
}

/// Eigenbases of `σ_x`, `σ_y`, `σ_z`.
pub fn pauli_quorum() -> FiniteQuorum {
    let s = 1.0 / 2f64.sqrt();
    let v = |a: C64, b: C64| DVector::from_vec(vec![a, b]);
    let r = |x: f64| C64::new(x, 0.0);
    let i = |x: f64| C64::new(0.0, x);
    let settings = vec![
        vec![v(r(s), r(s)), v(r(s), r(-s))],
        vec![v(r(s), i(s)), v(r(s), i(-s))],
        vec![v(r(1.0), r(0.0)), v(r(0.0), r(1.0))],
    ];
    FiniteQuorum::new(settings).expect("Pauli eigenbases are orthonormal")
}

/// `n_settings` Haar-like random orthonormal bases (QR of Ginibre matrices).
pub fn random_quorum(dim: usize, n_settings: usize, seed: u64) -> Result<FiniteQuorum> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = (0..n_settings)
        .map(|_| {
            let g = DMatrix::<C64>::from_fn(dim, dim, |_, _| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                C64::new(re, im)
            });
            let q = g.qr().q();
            (0..dim).map(|c| q.column(c).into_owned()).collect()
        })
        .collect();
    FiniteQuorum::new(settings)
}

/// Dual operators `C_j`, one per projector in flat `(k, m)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSet {
    pub duals: Vec<ComplexOperator>,
}

impl DualSet {
    /// Expansion coefficients `Tr[X C_j†]`.
    pub fn coefficients(&self, x: &ComplexOperator) -> Vec<C64> {
        self.duals.iter().map(|c| x.trace_product(&c.adjoint())).collect()
    }

    /// Duals for a tomographer whose projectors are replaced by `N(E_j)`:
    /// `D_j = (N⁻¹)†(C_j)`, so that `Σ_j Tr[ρ N(E_j)] D_j = ρ`.
    pub fn with_noise(&self, noise: &NoiseMap) -> DualSet {
        let adj = noise.inverse_superoperator.adjoint();
        let duals = self
            .duals
            .iter()
            .map(|c| ComplexOperator::from_vectorized(&(&adj * c.vectorize())).expect("square"))
            .collect();
        DualSet { duals }
    }
}

/// Canonical dual of an operator frame through the pseudo-inverse of its
/// Gram matrix: `C_j = Σ_i E_i (G⁺)_{ij}`, `G_{ij} = Tr[E_i† E_j]`.
pub fn compute_dual_frame(frame: &[ComplexOperator]) -> Result<Vec<ComplexOperator>> {
    let d = frame.first().map(|e| e.dim()).ok_or_else(|| Error::Validation("empty frame".into()))?;
    let n = frame.len();
    let vecs: Vec<DVector<C64>> = frame.iter().map(|e| e.vectorize()).collect();
    let gram = DMatrix::<C64>::from_fn(n, n, |i, j| vecs[i].dotc(&vecs[j]));
    let pinv = pseudo_inverse(&gram, RANK_TOL);
    if pinv.rank < d * d {
        return Err(Error::NotAQuorum { rank: pinv.rank, required: d * d });
    }
    Ok((0..n)
        .map(|j| {
            let mut acc = DVector::<C64>::zeros(d * d);
            for (i, v) in vecs.iter().enumerate() {
                acc += v * pinv.inverse[(i, j)];
            }
            ComplexOperator::from_vectorized(&acc).expect("square")
        })
        .collect())
}

pub fn compute_dual_set(q: &FiniteQuorum) -> Result<DualSet> {
    Ok(DualSet { duals: compute_dual_frame(&q.projectors())? })
}

pub const DEFAULT_MAX_NOISE_CONDITION: f64 = 1e12;

/// A linear map on operators, stored as a `d² × d²` matrix acting on
/// row-major vectorizations, together with its pseudo-inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap {
    pub dim: usize,
    pub superoperator: DMatrix<C64>,
    pub inverse_superoperator: DMatrix<C64>,
    pub condition_number: f64,
}

pub fn noise_map_from_superoperator(matrix: DMatrix<C64>, max_condition: f64) -> Result<NoiseMap> {
    let (r, c) = matrix.shape();
    let dim = (r as f64).sqrt().round() as usize;
    if r != c || dim * dim != r {
        return Err(Error::DimensionMismatch(format!("superoperator must be d²×d², got {r}x{c}")));
    }
    let pinv = pseudo_inverse(&matrix, 1e-14);
    let condition = pinv.condition_number(r);
    if !(condition <= max_condition) {
        return Err(Error::NonInvertibleNoise { condition, bound: max_condition });
    }
    Ok(NoiseMap { dim, superoperator: matrix, inverse_superoperator: pinv.inverse, condition_number: condition })
}

pub fn invert_noise_map(map: &NoiseMap) -> NoiseMap {
    NoiseMap {
        dim: map.dim,
        superoperator: map.inverse_superoperator.clone(),
        inverse_superoperator: map.superoperator.clone(),
        condition_number: map.condition_number,
    }
}

impl NoiseMap {
    pub fn identity(dim: usize) -> Self {
        let id = DMatrix::identity(dim * dim, dim * dim);
        Self { dim, superoperator: id.clone(), inverse_superoperator: id, condition_number: 1.0 }
    }

    /// `N(X) = (1−p) X + p Tr[X] I/d`.
    pub fn depolarizing(dim: usize, p: f64, max_condition: f64) -> Result<Self> {
        let id_vec = ComplexOperator::identity(dim).vectorize();
        let m = DMatrix::<C64>::identity(dim * dim, dim * dim) * C64::new(1.0 - p, 0.0)
            + (&id_vec * id_vec.transpose()) * C64::new(p / dim as f64, 0.0);
        noise_map_from_superoperator(m, max_condition)
    }

    pub fn apply(&self, x: &ComplexOperator) -> ComplexOperator {
        ComplexOperator::from_vectorized(&(&self.superoperator * x.vectorize())).expect("square")
    }

    pub fn apply_inverse(&self, x: &ComplexOperator) -> ComplexOperator {
        ComplexOperator::from_vectorized(&(&self.inverse_superoperator * x.vectorize())).expect("square")
    }
}

// ---------------------------------------------------------------------------
// Homodyne tomographer

/// Gaussian smearing variance `(1−η)/(4η)` in the rescaled-quadrature
/// convention (vacuum variance ¼).
pub fn smear_variance(eta_h: f64) -> f64 {
    (1.0 - eta_h) / (4.0 * eta_h)
}

/// Binomial weights for evaluating all smeared densities `q_0 … q_M` at once.
///
/// Inefficient homodyne on `|m⟩` equals ideal homodyne on the lossy state
/// `Σ_k C(m,k) η^k (1−η)^{m−k} |k⟩⟨k|`, rescaled by `1/√η`, which gives the
/// closed form `q_m(x) = √η Σ_k B(k; m, η) ψ_k(√η x)²`.
#[derive(Clone, Debug)]
pub struct SmearedFockDensities {
    pub eta_h: f64,
    pub max_m: usize,
    weights: Vec<Vec<f64>>,
}

impl SmearedFockDensities {
    pub fn new(max_m: usize, eta_h: f64) -> Self {
        let weights = (0..=max_m).map(|m| (0..=m).map(|k| binomial_pmf(m, k, eta_h)).collect()).collect();
        Self { eta_h, max_m, weights }
    }

    /// Writes `q_m(x)` for `m = 0..=max_m` into `out`.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let s = self.eta_h.sqrt();
        let psi = fock_quadrature_amplitudes(self.max_m, s * x);
        for (m, w) in self.weights.iter().enumerate() {
            out[m] = s * w.iter().zip(&psi).map(|(b, p)| b * p * p).sum::<f64>();
        }
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.max_m + 1];
        self.eval_into(x, &mut out);
        out
    }
}

/// `q_m(x) = (ψ_m² ⋆ Gauss(·; (1−η_h)/(4η_h)))(x)`.
pub fn smeared_fock_pdf(m: usize, eta_h: f64, x: f64) -> f64 {
    SmearedFockDensities::new(m, eta_h).eval(x)[m]
}

/// Uniform evaluation grid for kernels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub step: f64,
}

impl Default for KernelGrid {
    fn default() -> Self {
        Self { x_min: -8.0, x_max: 8.0, step: 1.0 / 512.0 }
    }
}

impl KernelGrid {
    pub fn len(&self) -> usize {
        ((self.x_max - self.x_min) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.step
    }
}

pub const KERNEL_RESIDUAL_TOL: f64 = 1e-4;

/// Sampled diagonal estimation kernels `K_m(x)`.
#[derive(Clone, Debug)]
pub struct KernelTable {
    pub grid: KernelGrid,
    pub fock_cutoff: usize,
    /// `values[i][m] = K_m(x_i)`, grid-major so one lookup serves all `m`.
    pub values: Vec<Vec<f64>>,
    /// `max_{m,j} |∫K_m q_j − δ_{mj}|` on the grid.
    pub residual: f64,
}

impl KernelTable {
    /// Linearly interpolated `K_m(x)` for all `m`; `false` when `x` lies
    /// outside the grid (and `out` is zeroed).
    pub fn eval_into(&self, x: f64, out: &mut [f64]) -> bool {
        let n = self.values.len();
        let t = (x - self.grid.x_min) / self.grid.step;
        if !(t >= 0.0 && t <= (n - 1) as f64) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return false;
        }
        let i = (t.floor() as usize).min(n - 2);
        let f = t - i as f64;
        let (a, b) = (&self.values[i], &self.values[i + 1]);
        for (m, o) in out.iter_mut().enumerate() {
            *o = a[m] + f * (b[m] - a[m]);
        }
        true
    }

    pub fn eval(&self, m: usize, x: f64) -> Option<f64> {
        let mut out = vec![0.0; self.fock_cutoff + 1];
        self.eval_into(x, &mut out).then(|| out[m])
    }

    /// CSV with columns `x, K_0, …, K_M`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string()];
        header.extend((0..=self.fock_cutoff).map(|m| format!("K_{m}")));
        wr.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.values.iter().enumerate() {
            let mut rec = vec![self.grid.point(i).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn check_efficiency(eta_h: f64) -> Result<()> {
    if !(eta_h > 0.5) {
        return Err(Error::EfficiencyTooLow { eta_h });
    }
    if eta_h > 1.0 {
        return Err(Error::Validation(format!("eta_h = {eta_h} exceeds 1")));
    }
    Ok(())
}

/// Solves the unbiasedness system `∫K_m q_j = δ_{mj}` (`m, j ≤ fock_cutoff`)
/// on the grid for the minimum-norm kernels. With `Q[i,j] = q_j(x_i)` and
/// `A = √h Q = U S Vᵀ`, the kernels are `K = h^{-1/2} U S (S² + λ)⁻¹ Vᵀ`,
/// with `λ = ridge · ‖hQᵀQ‖`; `ridge = 0` is the plain pseudo-inverse.
pub fn build_diagonal_kernels(fock_cutoff: usize, eta_h: f64, grid: KernelGrid, ridge: f64) -> Result<KernelTable> {
    check_efficiency(eta_h)?;
    if !(grid.step > 0.0 && grid.x_max > grid.x_min) || grid.len() < fock_cutoff + 2 {
        return Err(Error::Validation("kernel grid is empty or too short".into()));
    }
    let n = grid.len();
    let cols = fock_cutoff + 1;
    let dens = SmearedFockDensities::new(fock_cutoff, eta_h);
    let mut q = DMatrix::<f64>::zeros(n, cols);
    let mut buf = vec![0.0; cols];
    for i in 0..n {
        dens.eval_into(grid.point(i), &mut buf);
        for (j, v) in buf.iter().enumerate() {
            q[(i, j)] = *v;
        }
    }
    let h = grid.step;
    let a = &q * h.sqrt();
    let svd = a.svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let lambda = ridge * smax * smax;
    let factors: Vec<f64> = s
        .iter()
        .map(|&sv| if sv <= 1e-15 * smax { 0.0 } else { sv / (sv * sv + lambda) })
        .collect();
    // K = h^{-1/2} U diag(f) Vᵀ  (n × cols)
    let mut scaled_vt = vt.clone();
    for (r, f) in factors.iter().enumerate() {
        scaled_vt.row_mut(r).scale_mut(*f / h.sqrt());
    }
    let k = u * scaled_vt;
    let check = k.transpose() * &q * h;
    let mut residual = 0.0_f64;
    for mi in 0..cols {
        for j in 0..cols {
            let target = if mi == j { 1.0 } else { 0.0 };
            residual = residual.max((check[(mi, j)] - target).abs());
        }
    }
    if !(residual < KERNEL_RESIDUAL_TOL) {
        return Err(Error::KernelConstruction { residual, tolerance: KERNEL_RESIDUAL_TOL });
    }
    let values = (0..n).map(|i| k.row(i).iter().copied().collect()).collect();
    Ok(KernelTable { grid, fock_cutoff, values, residual })
}

/// Homodyne tomographer with efficiency `η_h > ½`, restricted to
/// photon-number-diagonal estimation up to `fock_cutoff`.
#[derive(Clone, Debug)]
pub struct HomodyneQuorum {
    pub eta_h: f64,
    pub fock_cutoff: usize,
    pub smear_sigma2: f64,
    pub kernels: KernelTable,
}

impl HomodyneQuorum {
    pub fn new(eta_h: f64, fock_cutoff: usize, grid: KernelGrid, ridge: f64) -> Result<Self> {
        let kernels = build_diagonal_kernels(fock_cutoff, eta_h, grid, ridge)?;
        Ok(Self { eta_h, fock_cutoff, smear_sigma2: smear_variance(eta_h), kernels })
    }

    pub fn densities(&self) -> SmearedFockDensities {
        SmearedFockDensities::new(self.fock_cutoff, self.eta_h)
    }
}
