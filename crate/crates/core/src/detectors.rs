//! Ground-truth detector POVMs: projective measurements, random POVMs for the
//! finite-dimensional oracle tests, and the noisy photocounter (beam splitter
//! of transmissivity `η_p` mixing the signal with a thermal mode, followed by
//! an ideal counter).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmath::{binomial_pmf, hermitian_function, ComplexOperator, C64};

/// Hermiticity tolerance for POVM elements.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Most negative eigenvalue tolerated in a POVM element.
pub const POSITIVITY_TOL: f64 = 1e-10;
/// Entrywise tolerance on `Σ_n P_n = I`.
pub const COMPLETENESS_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Povm {
    pub dim: usize,
    pub elements: Vec<ComplexOperator>,
}

/// How far a set of operators is from being a POVM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PovmReport {
    pub max_antihermitian_deviation: f64,
    pub min_eigenvalue: f64,
    /// `max |Σ_n P_n − I|` entrywise.
    pub completeness_deviation: f64,
}

impl PovmReport {
    pub fn satisfies(&self, hermitian_tol: f64, positivity_tol: f64, completeness_tol: f64) -> bool {
        self.max_antihermitian_deviation <= hermitian_tol
            && self.min_eigenvalue >= -positivity_tol
            && self.completeness_deviation <= completeness_tol
    }
}

/// Invariant report for any list of operators of equal dimension.
pub fn povm_report(dim: usize, elements: &[ComplexOperator]) -> PovmReport {
    let mut herm = 0.0_f64;
    let mut min_eig = f64::INFINITY;
    let mut sum = ComplexOperator::zeros(dim);
    for e in elements {
        if is_diagonal(e) {
            min_eig = e.diagonal_real().into_iter().fold(min_eig, f64::min);
            for i in 0..dim {
                herm = herm.max(e.get(i, i).im.abs() * 2.0);
            }
        } else {
            let r = e.positivity_report();
            herm = herm.max(r.max_antihermitian_deviation);
            min_eig = min_eig.min(r.min_eigenvalue);
        }
        sum = &sum + e;
    }
    PovmReport {
        max_antihermitian_deviation: herm,
        min_eigenvalue: if elements.is_empty() { 0.0 } else { min_eig },
        completeness_deviation: sum.max_abs_diff(&ComplexOperator::identity(dim)),
    }
}

fn is_diagonal(x: &ComplexOperator) -> bool {
    let d = x.dim();
    (0..d).all(|i| (0..d).all(|j| i == j || x.get(i, j) == C64::new(0.0, 0.0)))
}

impl Povm {
    /// Validates positivity and completeness at the module tolerances.
    pub fn new(elements: Vec<ComplexOperator>) -> Result<Self> {
        let povm = Self::new_unchecked(elements)?;
        let r = povm.report();
        if !r.satisfies(HERMITIAN_TOL, POSITIVITY_TOL, COMPLETENESS_TOL) {
            return Err(Error::Validation(format!(
                "not a POVM: antihermitian {:e}, min eigenvalue {:e}, completeness {:e}",
                r.max_antihermitian_deviation, r.min_eigenvalue, r.completeness_deviation
            )));
        }
        Ok(povm)
    }

    /// Checks only that all elements share one dimension.
    pub fn new_unchecked(elements: Vec<ComplexOperator>) -> Result<Self> {
        let dim = elements.first().map(|e| e.dim()).ok_or_else(|| Error::Validation("empty POVM".into()))?;
        if elements.iter().any(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch("POVM elements differ in dimension".into()));
        }
        Ok(Self { dim, elements })
    }

    /// Diagonal POVM from `diagonals[outcome][level]`.
    pub fn from_diagonals(diagonals: &[Vec<f64>]) -> Result<Self> {
        Self::new(diagonals.iter().map(|d| ComplexOperator::from_real_diagonal(d)).collect())
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn report(&self) -> PovmReport {
        povm_report(self.dim, &self.elements)
    }

    pub fn is_diagonal(&self) -> bool {
        self.elements.iter().all(is_diagonal)
    }

    /// `⟨m|P_n|m⟩` as `[n][m]`.
    pub fn diagonals(&self) -> Vec<Vec<f64>> {
        self.elements.iter().map(|e| e.diagonal_real()).collect()
    }
}

/// `P_n = |o_n⟩⟨o_n|` for an orthonormal basis.
pub fn projective_povm(basis: &[DVector<C64>]) -> Result<Povm> {
    let d = basis.len();
    if d == 0 || basis.iter().any(|v| v.len() != d) {
        return Err(Error::Validation(format!("need {d} vectors of length {d} for a basis")));
    }
    let mut worst = 0.0_f64;
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate() {
            let g = a.dotc(b);
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - C64::new(target, 0.0)).norm());
        }
    }
    if worst >= 1e-10 {
        return Err(Error::Validation(format!("basis is not orthonormal (Gram deviation {worst:e})")));
    }
    Povm::new(basis.iter().map(ComplexOperator::projector).collect())
}

/// Computational basis vectors of `C^d`.
pub fn computational_basis(d: usize) -> Vec<DVector<C64>> {
    (0..d)
        .map(|i| DVector::from_fn(d, |k, _| if k == i { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }))
        .collect()
}

/// Thermal photon-number distribution `ν^j/(1+ν)^{j+1}` for `j ≤ cutoff`.
pub fn thermal_distribution(nu: f64, cutoff: usize) -> Vec<f64> {
    let r = nu / (1.0 + nu);
    (0..=cutoff).map(|j| r.powi(j as i32) / (1.0 + nu)).collect()
}

/// Thermal mass above `cutoff`: `(ν/(1+ν))^{cutoff+1}`.
pub fn thermal_tail(nu: f64, cutoff: usize) -> f64 {
    (nu / (1.0 + nu)).powi(cutoff as i32 + 1)
}

pub const THERMAL_TAIL_TOL: f64 = 1e-8;

fn check_photocounter_args(eta_p: f64, nu: f64, env_cutoff: usize) -> Result<()> {
    if !(eta_p > 0.0 && eta_p <= 1.0) {
        return Err(Error::Validation(format!("eta_p = {eta_p} must lie in (0, 1]")));
    }
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::Validation(format!("nu = {nu} must be nonnegative")));
    }
    let tail = thermal_tail(nu, env_cutoff);
    if tail >= THERMAL_TAIL_TOL {
        return Err(Error::TailMass { tail, tolerance: THERMAL_TAIL_TOL });
    }
    Ok(())
}

/// Probability that the counter clicks `k` times for Fock input `n`.
///
/// A beam splitter with a thermal environment is the phase-insensitive
/// Gaussian channel with transmissivity `η_p` and added noise `(1−η_p)ν`. It
/// factors exactly into pure loss `τ = η_p/G` followed by a quantum-limited
/// amplifier of gain `G = 1 + (1−η_p)ν`, whose Fock transition laws are
/// binomial and negative binomial. All terms are positive.
pub fn photocounter_click_probability(eta_p: f64, nu: f64, n: usize, k: usize) -> f64 {
    let gain = 1.0 + (1.0 - eta_p) * nu;
    let tau = eta_p / gain;
    (0..=n.min(k))
        .map(|m| binomial_pmf(n, m, tau) * amplifier_pmf(gain, m, k))
        .sum()
}

/// Quantum-limited amplifier: `P(k|m) = C(k,m) G^{-(m+1)} (1−1/G)^{k−m}`.
fn amplifier_pmf(gain: f64, m: usize, k: usize) -> f64 {
    if k < m {
        return 0.0;
    }
    if gain == 1.0 {
        return if k == m { 1.0 } else { 0.0 };
    }
    let ln = crate::qmath::ln_binomial(k, m) - (m as f64 + 1.0) * gain.ln()
        + (k - m) as f64 * (1.0 - 1.0 / gain).ln();
    ln.exp()
}

/// Fock-diagonal POVM of the noisy photocounter on levels `0..=fock_cutoff`,
/// with outcomes `0..=fock_cutoff+env_cutoff`. The last outcome absorbs the
/// remaining click probability so completeness holds on the truncated space.
pub fn noisy_photocounter(eta_p: f64, nu: f64, fock_cutoff: usize, env_cutoff: usize) -> Result<Povm> {
    check_photocounter_args(eta_p, nu, env_cutoff)?;
    let n_out = fock_cutoff + env_cutoff + 1;
    let mut diag = vec![vec![0.0; fock_cutoff + 1]; n_out];
    for n in 0..=fock_cutoff {
        let mut acc = 0.0;
        for (k, row) in diag.iter_mut().enumerate().take(n_out - 1) {
            let p = photocounter_click_probability(eta_p, nu, n, k);
            row[n] = p;
            acc += p;
        }
        diag[n_out - 1][n] = (1.0 - acc).max(0.0);
    }
    Povm::from_diagonals(&diag)
}

/// Brute-force reference for [`noisy_photocounter`]: evolves `|n⟩ ⊗ |j⟩`
/// through the two-mode beam-splitter unitary `exp(θ(a†b − ab†))`,
/// `cos θ = √η_p`, built explicitly on each fixed-total-photon block and
/// exponentiated by diagonalization, then averages over the thermal
/// environment and traces it out. Shares no formulas with the production
/// path, so agreement pins the model down.
pub fn photocounter_by_beam_splitter(eta_p: f64, nu: f64, fock_cutoff: usize, env_cutoff: usize) -> Result<Povm> {
    check_photocounter_args(eta_p, nu, env_cutoff)?;
    let theta = eta_p.sqrt().acos();
    let thermal = thermal_distribution(nu, env_cutoff);
    let n_out = fock_cutoff + env_cutoff + 1;
    let mut diag = vec![vec![0.0; fock_cutoff + 1]; n_out];
    let max_total = fock_cutoff + env_cutoff;
    let unitaries: Vec<DMatrix<C64>> = (0..=max_total).map(|total| beam_splitter_block(total, theta)).collect();
    for n in 0..=fock_cutoff {
        for (j, pj) in thermal.iter().enumerate() {
            // block basis |k, total − k⟩ indexed by k
            let u = &unitaries[n + j];
            for (k, row) in diag.iter_mut().enumerate().take(n + j + 1) {
                row[n] += pj * u[(k, n)].norm_sqr();
            }
        }
        let acc: f64 = diag[..n_out - 1].iter().map(|row| row[n]).sum();
        diag[n_out - 1][n] = (1.0 - acc).max(0.0);
    }
    Povm::from_diagonals(&diag)
}

fn beam_splitter_block(total: usize, theta: f64) -> DMatrix<C64> {
    let size = total + 1;
    // generator K = a†b − ab† on |k, total−k⟩
    let mut gen = DMatrix::<f64>::zeros(size, size);
    for k in 0..total {
        let amp = ((k + 1) as f64).sqrt() * ((total - k) as f64).sqrt();
        gen[(k + 1, k)] += amp;
        gen[(k, k + 1)] -= amp;
    }
    // iK is Hermitian: exp(θK) = V exp(−iθλ) V†
    let herm = gen.map(|v| C64::new(0.0, v));
    let eig = SymmetricEigen::new(herm);
    let phases = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| C64::from_polar(1.0, -theta * l)));
    let v = &eig.eigenvectors;
    v * phases * v.adjoint()
}

/// Reproducible random POVM: Ginibre draws `A_n A_n†` normalized by
/// `S^{-1/2} · P_n · S^{-1/2}`, `S = Σ_n P_n`.
pub fn random_povm(dim: usize, n_outcomes: usize, seed: u64) -> Result<Povm> {
    if n_outcomes == 0 || dim == 0 {
        return Err(Error::Validation("random POVM needs dim >= 1 and n_outcomes >= 1".into()));
    }
    if n_outcomes == 1 {
        return Povm::new(vec![ComplexOperator::identity(dim)]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(n_outcomes);
    for _ in 0..n_outcomes {
        let a = ComplexOperator::from_fn(dim, |_, _| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            C64::new(re, im)
        });
        raw.push((&a * &a.adjoint()).hermitian_part());
    }
    let sum = raw.iter().fold(ComplexOperator::zeros(dim), |acc, p| &acc + p);
    let s_inv_sqrt = hermitian_function(&sum.hermitian_part(), |l| 1.0 / l.sqrt());
    let elements = raw.iter().map(|p| (&(&s_inv_sqrt * p) * &s_inv_sqrt).hermitian_part()).collect();
    Povm::new(elements)
}

/// `p(n) = Tr[ρ P_n]`.
pub fn born_probabilities(povm: &Povm, rho: &ComplexOperator) -> Result<Vec<f64>> {
    if rho.dim() != povm.dim {
        return Err(Error::DimensionMismatch(format!(
            "state dim {} does not match POVM dim {}",
            rho.dim(),
            povm.dim
        )));
    }
    Ok(povm.elements.iter().map(|p| rho.trace_product(p).re).collect())
}

/// Mean click number `Σ_k k ⟨n|P_k|n⟩` for each Fock input.
pub fn mean_counts(povm: &Povm) -> Vec<f64> {
    let diag = povm.diagonals();
    (0..povm.dim)
        .map(|n| diag.iter().enumerate().map(|(k, row)| k as f64 * row[n]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmath::binomial;

    fn binomial_click(n: usize, k: usize, eta: f64) -> f64 {
        binomial(n, k) * eta.powi(k as i32) * (1.0 - eta).powi((n - k) as i32)
    }

    #[test]
    fn computational_basis_povm() {
        let p = projective_povm(&computational_basis(2)).unwrap();
        assert_eq!(p.elements[0], ComplexOperator::from_real_diagonal(&[1.0, 0.0]));
        assert_eq!(p.elements[1], ComplexOperator::from_real_diagonal(&[0.0, 1.0]));
    }

    #[test]
    fn hadamard_basis_povm() {
        let s = 1.0 / 2f64.sqrt();
        let plus = DVector::from_vec(vec![C64::new(s, 0.0), C64::new(s, 0.0)]);
        let minus = DVector::from_vec(vec![C64::new(s, 0.0), C64::new(-s, 0.0)]);
        let p = projective_povm(&[plus, minus]).unwrap();
        let e0 = ComplexOperator::from_row_major(2, vec![C64::new(0.5, 0.0); 4]).unwrap();
        let e1 = ComplexOperator::from_row_major(
            2,
            vec![C64::new(0.5, 0.0), C64::new(-0.5, 0.0), C64::new(-0.5, 0.0), C64::new(0.5, 0.0)],
        )
        .unwrap();
        assert!(p.elements[0].max_abs_diff(&e0) < 1e-15);
        assert!(p.elements[1].max_abs_diff(&e1) < 1e-15);
    }

    #[test]
    fn non_orthonormal_basis_is_rejected() {
        let a = DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
        let b = DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0)]);
        assert!(matches!(projective_povm(&[a, b]), Err(Error::Validation(_))));
    }

    #[test]
    fn ideal_counter() {
        let p = noisy_photocounter(1.0, 0.0, 6, 0).unwrap();
        for (k, e) in p.elements.iter().enumerate() {
            let mut d = vec![0.0; 7];
            d[k] = 1.0;
            assert!(e.max_abs_diff(&ComplexOperator::from_real_diagonal(&d)) < 1e-15);
        }
    }

    #[test]
    fn pure_loss_is_binomial() {
        let eta = 0.7;
        let p = noisy_photocounter(eta, 0.0, 10, 0).unwrap().diagonals();
        for n in 0..=10 {
            for k in 0..=10 {
                let expect = if k <= n { binomial_click(n, k, eta) } else { 0.0 };
                assert!((p[k][n] - expect).abs() < 1e-13, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn photocounter_matches_beam_splitter_reference() {
        for &(eta, nu) in &[(0.8f64, 1.0f64), (0.5, 0.3), (0.95, 2.0), (0.6, 0.0)] {
            let env = if nu == 0.0 { 0 } else { (((1e-9_f64).ln() / (nu / (1.0 + nu)).ln()).ceil()) as usize };
            let fast = noisy_photocounter(eta, nu, 12, env).unwrap();
            let slow = photocounter_by_beam_splitter(eta, nu, 12, env).unwrap();
            for (a, b) in fast.elements.iter().zip(&slow.elements) {
                assert!(a.max_abs_diff(b) < 1e-8, "eta={eta} nu={nu}: {}", a.max_abs_diff(b));
            }
        }
    }

    #[test]
    fn photocounter_is_diagonal_with_mean_count_identity() {
        let (eta, nu) = (0.8, 1.0);
        let p = noisy_photocounter(eta, nu, 15, 40).unwrap();
        assert!(p.is_diagonal());
        let means = mean_counts(&p);
        for (n, m) in means.iter().enumerate() {
            assert!((m - (eta * n as f64 + (1.0 - eta) * nu)).abs() < 1e-6, "n={n}: {m}");
        }
    }

    #[test]
    fn photocounter_tail_check() {
        assert!(matches!(noisy_photocounter(0.8, 1.0, 5, 10), Err(Error::TailMass { .. })));
        assert!(noisy_photocounter(0.0, 1.0, 5, 30).is_err());
    }

    #[test]
    fn random_povm_single_outcome_is_identity() {
        let p = random_povm(3, 1, 9).unwrap();
        assert_eq!(p.elements, vec![ComplexOperator::identity(3)]);
    }

    #[test]
    fn random_povm_is_valid_and_reproducible() {
        for seed in 0..10 {
            let a = random_povm(3, 4, seed).unwrap();
            let b = random_povm(3, 4, seed).unwrap();
            assert_eq!(a, b);
            assert!(a.report().satisfies(HERMITIAN_TOL, POSITIVITY_TOL, COMPLETENESS_TOL));
        }
        assert_ne!(random_povm(2, 3, 1).unwrap(), random_povm(2, 3, 2).unwrap());
    }

    #[test]
    fn born_rule_examples() {
        let proj = projective_povm(&computational_basis(3)).unwrap();
        let p = born_probabilities(&proj, &ComplexOperator::identity(3).scale_real(1.0 / 3.0)).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let ideal = noisy_photocounter(1.0, 0.0, 30, 0).unwrap();
        let vac = ComplexOperator::from_real_diagonal(&thermal_distribution(0.0, 30));
        assert_eq!(born_probabilities(&ideal, &vac).unwrap()[0], 1.0);

        let th = ComplexOperator::from_real_diagonal(&thermal_distribution(1.0, 30));
        let p = born_probabilities(&ideal, &th).unwrap();
        for k in 0..10 {
            assert!((p[k] - 0.5_f64.powi(k as i32 + 1)).abs() < 1e-15);
        }

        assert!(born_probabilities(&ideal, &ComplexOperator::identity(2)).is_err());
    }
}
