//! Dense complex linear algebra on truncated Hilbert spaces, plus the
//! Fock-basis quadrature wavefunctions used by the homodyne tomographer.
//!
//! Operators are stored as dense `dim × dim` matrices. Vectorization is
//! row-major: `vec(X)[i * dim + j] = X[i, j]`, so the Hilbert–Schmidt inner
//! product `Tr[A† B]` is the ordinary complex dot product of the vectorized
//! operators.

use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// A dense square complex matrix: states, POVM elements and projectors all
/// live here.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexOperator(DMatrix<C64>);

/// Serialized as `{"re": [[..]], "im": [[..]]}`, row by row.
#[derive(Serialize, Deserialize)]
struct OperatorRows {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl Serialize for ComplexOperator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let d = self.dim();
        let rows = |f: fn(&C64) -> f64| (0..d).map(|i| (0..d).map(|j| f(&self.0[(i, j)])).collect()).collect();
        OperatorRows { re: rows(|z| z.re), im: rows(|z| z.im) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ComplexOperator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = OperatorRows::deserialize(d)?;
        let n = rows.re.len();
        let square = |m: &Vec<Vec<f64>>| m.len() == n && m.iter().all(|r| r.len() == n);
        if !square(&rows.re) || !square(&rows.im) {
            return Err(serde::de::Error::custom("operator must be square with matching re/im parts"));
        }
        Ok(Self(DMatrix::from_fn(n, n, |i, j| C64::new(rows.re[i][j], rows.im[i][j]))))
    }
}

/// Hermiticity and positivity diagnostics for an operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HermitianCheckReport {
    /// `max |x[i][j] - conj(x[j][i])|`.
    pub max_antihermitian_deviation: f64,
    /// Smallest eigenvalue of the Hermitian part `(x + x†)/2`.
    pub min_eigenvalue: f64,
}

impl ComplexOperator {
    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_matrix(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "operator must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self(m))
    }

    /// Builds an operator from `dim²` entries in row-major order.
    pub fn from_row_major(dim: usize, entries: Vec<C64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for dim {dim}, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Ok(Self(DMatrix::from_row_slice(dim, dim, &entries)))
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> C64) -> Self {
        Self(DMatrix::from_fn(dim, dim, f))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let d = diag.len();
        Self::from_fn(d, |i, j| if i == j { C64::new(diag[i], 0.0) } else { ZERO })
    }

    /// `|v⟩⟨v|`
    pub fn projector(v: &DVector<C64>) -> Self {
        Self(v * v.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.0[(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.0[(i, j)] = v;
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self(&self.0 * s)
    }

    pub fn scale_real(&self, s: f64) -> Self {
        Self(self.0.map(|z| z * s))
    }

    pub fn diagonal_real(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)].re).collect()
    }

    pub fn hermitian_part(&self) -> Self {
        Self((&self.0 + self.0.adjoint()) * C64::new(0.5, 0.0))
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "max_abs_diff on different dims");
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `Tr[self · other]`
    pub fn trace_product(&self, other: &Self) -> C64 {
        let d = self.dim();
        let mut acc = ZERO;
        for i in 0..d {
            for k in 0..d {
                acc += self.0[(i, k)] * other.0[(k, i)];
            }
        }
        acc
    }

    /// Row-major vectorization.
    pub fn vectorize(&self) -> DVector<C64> {
        let d = self.dim();
        DVector::from_fn(d * d, |idx, _| self.0[(idx / d, idx % d)])
    }

    pub fn from_vectorized(v: &DVector<C64>) -> Result<Self> {
        let d = (v.len() as f64).sqrt().round() as usize;
        if d * d != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} is not a vectorized square operator",
                v.len()
            )));
        }
        Ok(Self::from_fn(d, |i, j| v[i * d + j]))
    }

    /// Kronecker product with `result[(i·db+p),(j·db+q)] = a[i,j]·b[p,q]`.
    pub fn tensor_product(&self, other: &Self) -> Self {
        Self(self.0.kronecker(&other.0))
    }

    /// Traces out the first tensor factor of dimension `dim_first`.
    pub fn partial_trace_first(&self, dim_first: usize) -> Result<Self> {
        let d = self.dim();
        if dim_first == 0 || d % dim_first != 0 {
            return Err(Error::DimensionMismatch(format!(
                "dimension {d} is not divisible by first-factor dimension {dim_first}"
            )));
        }
        let ds = d / dim_first;
        Ok(Self::from_fn(ds, |p, q| {
            (0..dim_first).map(|i| self.0[(i * ds + p, i * ds + q)]).sum()
        }))
    }

    /// Traces out the second tensor factor of dimension `dim_second`.
    pub fn partial_trace_second(&self, dim_second: usize) -> Result<Self> {
        let d = self.dim();
        if dim_second == 0 || d % dim_second != 0 {
            return Err(Error::DimensionMismatch(format!(
                "dimension {d} is not divisible by second-factor dimension {dim_second}"
            )));
        }
        let df = d / dim_second;
        Ok(Self::from_fn(df, |i, j| {
            (0..dim_second).map(|p| self.0[(i * dim_second + p, j * dim_second + p)]).sum()
        }))
    }

    /// Antihermitian deviation and the spectrum floor of the Hermitian part.
    /// The operator is never symmetrized in place.
    pub fn positivity_report(&self) -> HermitianCheckReport {
        let d = self.dim();
        let mut dev = 0.0_f64;
        for i in 0..d {
            for j in 0..d {
                dev = dev.max((self.0[(i, j)] - self.0[(j, i)].conj()).norm());
            }
        }
        let min_eigenvalue = if d == 0 {
            0.0
        } else {
            hermitian_eigenvalues(&self.hermitian_part()).into_iter().fold(f64::INFINITY, f64::min)
        };
        HermitianCheckReport { max_antihermitian_deviation: dev, min_eigenvalue }
    }
}

impl Add for &ComplexOperator {
    type Output = ComplexOperator;
    fn add(self, rhs: Self) -> ComplexOperator {
        ComplexOperator(&self.0 + &rhs.0)
    }
}

impl Sub for &ComplexOperator {
    type Output = ComplexOperator;
    fn sub(self, rhs: Self) -> ComplexOperator {
        ComplexOperator(&self.0 - &rhs.0)
    }
}

impl Mul for &ComplexOperator {
    type Output = ComplexOperator;
    fn mul(self, rhs: Self) -> ComplexOperator {
        ComplexOperator(&self.0 * &rhs.0)
    }
}

/// Eigenvalues of a Hermitian operator, ascending.
pub fn hermitian_eigenvalues(h: &ComplexOperator) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(h.0.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Applies `f` to the spectrum of a Hermitian operator.
pub fn hermitian_function(h: &ComplexOperator, f: impl Fn(f64) -> f64) -> ComplexOperator {
    let eig = SymmetricEigen::new(h.0.clone());
    let fd = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| C64::new(f(l), 0.0)));
    let v = &eig.eigenvectors;
    ComplexOperator(v * fd * v.adjoint())
}

/// Moore–Penrose pseudo-inverse by SVD.
#[derive(Clone, Debug)]
pub struct PseudoInverse {
    pub inverse: DMatrix<C64>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

impl PseudoInverse {
    /// Ratio of the largest to the smallest singular value, infinite if any
    /// singular value fell below the relative cutoff or the matrix has fewer
    /// singular values than `required_rank`.
    pub fn condition_number(&self, required_rank: usize) -> f64 {
        if self.rank < required_rank || self.rank == 0 {
            return f64::INFINITY;
        }
        let max = self.singular_values.iter().copied().fold(0.0, f64::max);
        let min = self.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Singular values below `rel_tol · σ_max` are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<C64>, rel_tol: f64) -> PseudoInverse {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return PseudoInverse { inverse: DMatrix::zeros(c, r), singular_values: vec![], rank: 0 };
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let cut = rel_tol * smax;
    let mut inv = DMatrix::<C64>::zeros(c, r);
    let mut rank = 0;
    for (k, &s) in sv.iter().enumerate() {
        if s <= cut || s == 0.0 {
            continue;
        }
        rank += 1;
        let vk = vt.row(k).adjoint();
        let uk = u.column(k).adjoint();
        inv += (vk * uk) * C64::new(1.0 / s, 0.0);
    }
    PseudoInverse { inverse: inv, singular_values: sv, rank }
}

/// Numerical rank of a complex matrix at relative tolerance.
pub fn matrix_rank(m: &DMatrix<C64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rel_tol * smax && s > 0.0).count()
}

/// Quadrature wavefunctions `ψ_0(x) … ψ_max_m(x)` in the convention where
/// the vacuum has quadrature variance ¼, i.e. `ψ_0(x) = (2/π)^{1/4} e^{-x²}`.
///
/// Uses the normalized three-term recurrence
/// `ψ_{n+1} = (2x ψ_n − √n ψ_{n−1}) / √(n+1)`, which never forms factorials.
pub fn fock_quadrature_amplitudes(max_m: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_m + 1);
    out.push((2.0 / std::f64::consts::PI).powf(0.25) * (-x * x).exp());
    if max_m >= 1 {
        out.push(2.0 * x * out[0]);
    }
    for n in 1..max_m {
        let next = (2.0 * x * out[n] - (n as f64).sqrt() * out[n - 1]) / ((n + 1) as f64).sqrt();
        out.push(next);
    }
    out
}

/// `ψ_m(x)`; see [`fock_quadrature_amplitudes`].
pub fn fock_quadrature_amplitude(m: usize, x: f64) -> f64 {
    fock_quadrature_amplitudes(m, x)[m]
}

/// Binomial coefficient as a float, exact for the small arguments used here.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Binomial probability mass `C(n,k) p^k (1-p)^{n-k}`, computed in log space.
pub fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

pub fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn pauli_y() -> ComplexOperator {
        ComplexOperator::from_row_major(2, vec![ZERO, c(0.0, -1.0), c(0.0, 1.0), ZERO]).unwrap()
    }

    #[test]
    fn identity_tensor_identity() {
        let i2 = ComplexOperator::identity(2);
        assert_eq!(i2.tensor_product(&i2), ComplexOperator::identity(4));
    }

    #[test]
    fn projector_tensor_projector() {
        let a = ComplexOperator::from_real_diagonal(&[1.0, 0.0]);
        let b = ComplexOperator::from_real_diagonal(&[0.0, 1.0]);
        assert_eq!(a.tensor_product(&b), ComplexOperator::from_real_diagonal(&[0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn kronecker_index_convention() {
        let a = ComplexOperator::from_fn(2, |i, j| c((i * 2 + j) as f64, 1.0));
        let b = ComplexOperator::from_fn(3, |p, q| c(1.0, (p * 3 + q) as f64));
        let k = a.tensor_product(&b);
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    for q in 0..3 {
                        assert_eq!(k.get(i * 3 + p, j * 3 + q), a.get(i, j) * b.get(p, q));
                    }
                }
            }
        }
    }

    #[test]
    fn partial_trace_of_identity() {
        let r = ComplexOperator::identity(4).partial_trace_first(2).unwrap();
        assert_eq!(r, ComplexOperator::identity(2).scale_real(2.0));
    }

    #[test]
    fn partial_trace_rejects_non_divisible() {
        assert!(matches!(
            ComplexOperator::identity(5).partial_trace_first(2),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn partial_trace_of_bell_state() {
        // |Ψ⟩ = (|00⟩ + |11⟩)/√2, written out explicitly.
        let mut rho = ComplexOperator::zeros(4);
        for &(i, j) in &[(0, 0), (0, 3), (3, 0), (3, 3)] {
            rho.set(i, j, c(0.5, 0.0));
        }
        let red = rho.partial_trace_first(2).unwrap();
        assert!(red.max_abs_diff(&ComplexOperator::identity(2).scale_real(0.5)) < 1e-15);
    }

    #[test]
    fn positivity_reports() {
        let r = ComplexOperator::from_real_diagonal(&[1.0, 0.0]).positivity_report();
        assert_eq!(r.max_antihermitian_deviation, 0.0);
        assert!(r.min_eigenvalue.abs() < 1e-15);

        let r = ComplexOperator::from_real_diagonal(&[1.0, -0.5]).positivity_report();
        assert_eq!(r.max_antihermitian_deviation, 0.0);
        assert!((r.min_eigenvalue + 0.5).abs() < 1e-15);

        let r = pauli_y().positivity_report();
        assert_eq!(r.max_antihermitian_deviation, 0.0);
        assert!((r.min_eigenvalue + 1.0).abs() < 1e-14);
    }

    #[test]
    fn antihermitian_deviation_is_reported() {
        let x = ComplexOperator::from_row_major(2, vec![ONE, c(2.0, 0.0), ZERO, ONE]).unwrap();
        let r = x.positivity_report();
        assert!((r.max_antihermitian_deviation - 2.0).abs() < 1e-15);
    }

    #[test]
    fn vacuum_amplitude_at_origin() {
        let v = fock_quadrature_amplitude(0, 0.0);
        assert!((v - (2.0 / std::f64::consts::PI).powf(0.25)).abs() < 1e-15);
    }

    #[test]
    fn high_order_amplitudes_stay_finite() {
        for &x in &[-9.0, -3.3, 0.0, 0.7, 5.5, 9.0] {
            let a = fock_quadrature_amplitudes(80, x);
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn vectorize_round_trip() {
        let a = ComplexOperator::from_fn(3, |i, j| c(i as f64, j as f64 * 2.0));
        assert_eq!(ComplexOperator::from_vectorized(&a.vectorize()).unwrap(), a);
        assert_eq!(a.vectorize()[1 * 3 + 2], a.get(1, 2));
    }

    #[test]
    fn pseudo_inverse_of_singular_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, ZERO]);
        let p = pseudo_inverse(&m, 1e-12);
        assert_eq!(p.rank, 1);
        assert!(p.condition_number(2).is_infinite());
        assert!((p.inverse[(0, 0)] - ONE).norm() < 1e-14);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(3, 4), 0.0);
        assert!((binomial_pmf(4, 2, 0.5) - 0.375).abs() < 1e-14);
        assert_eq!(binomial_pmf(3, 0, 0.0), 1.0);
    }
}
