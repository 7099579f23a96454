//! Bipartite input states `R` on `H ⊗ T` and the conditioning map
//! `X ↦ Tr₁[(X ⊗ 1) R]` that links detector-side operators to
//! tomographer-side conditioned states.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmath::{pseudo_inverse, ComplexOperator, C64};

/// Storage for the joint state.
#[derive(Clone, Debug, PartialEq)]
pub enum StateRepr {
    /// Full density operator on `H ⊗ T`, first factor `H`.
    Dense(ComplexOperator),
    /// Pure state `Σ_m c_m |m⟩|m⟩` with real coefficients. Kept factored so
    /// Fock cutoffs of ~60 never materialize a `3600²` matrix.
    Schmidt(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteState {
    pub dim_system: usize,
    pub dim_tomo: usize,
    pub repr: StateRepr,
    /// Probability mass removed by truncation before renormalization.
    pub truncation_deficit: f64,
}

impl BipartiteState {
    /// Wraps a density operator, checking Hermiticity, positivity and trace.
    pub fn from_density(rho: ComplexOperator, dim_system: usize, dim_tomo: usize) -> Result<Self> {
        if rho.dim() != dim_system * dim_tomo {
            return Err(Error::DimensionMismatch(format!(
                "state of dim {} does not factor as {dim_system}x{dim_tomo}",
                rho.dim()
            )));
        }
        let rep = rho.positivity_report();
        if rep.max_antihermitian_deviation > 1e-12 || rep.min_eigenvalue < -1e-10 {
            return Err(Error::Validation(format!(
                "not a density operator: antihermitian {:e}, min eigenvalue {:e}",
                rep.max_antihermitian_deviation, rep.min_eigenvalue
            )));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > 1e-12 || tr.im.abs() > 1e-12 {
            return Err(Error::Validation(format!("state trace is {tr}, expected 1")));
        }
        Ok(Self { dim_system, dim_tomo, repr: StateRepr::Dense(rho), truncation_deficit: 0.0 })
    }

    /// `ρ_H ⊗ ρ_T`; never faithful.
    pub fn product(rho_system: &ComplexOperator, rho_tomo: &ComplexOperator) -> Result<Self> {
        Self::from_density(rho_system.tensor_product(rho_tomo), rho_system.dim(), rho_tomo.dim())
    }

    /// Schmidt coefficients `c_m` when the state is stored factored.
    pub fn schmidt_coefficients(&self) -> Option<&[f64]> {
        match &self.repr {
            StateRepr::Schmidt(c) => Some(c),
            StateRepr::Dense(_) => None,
        }
    }

    /// Pair-number weights `|c_m|²` of a factored state.
    pub fn schmidt_weights(&self) -> Option<Vec<f64>> {
        self.schmidt_coefficients().map(|c| c.iter().map(|v| v * v).collect())
    }

    /// Materializes the density operator. Intended for small dimensions.
    pub fn density_matrix(&self) -> ComplexOperator {
        match &self.repr {
            StateRepr::Dense(rho) => rho.clone(),
            StateRepr::Schmidt(c) => {
                let d = c.len();
                let mut rho = ComplexOperator::zeros(d * d);
                for (m, cm) in c.iter().enumerate() {
                    for (mp, cmp) in c.iter().enumerate() {
                        rho.set(m * d + m, mp * d + mp, C64::new(cm * cmp, 0.0));
                    }
                }
                rho
            }
        }
    }

    /// `R(X) = Tr₁[(X ⊗ 1) R]`, an operator on `T`.
    pub fn apply_map(&self, x: &ComplexOperator) -> Result<ComplexOperator> {
        self.check_system_dim(x)?;
        match &self.repr {
            StateRepr::Dense(rho) => {
                let big = &x.tensor_product(&ComplexOperator::identity(self.dim_tomo)) * rho;
                big.partial_trace_first(self.dim_system)
            }
            // Y[m, m'] = c_m c_m' X[m', m]
            StateRepr::Schmidt(c) => Ok(ComplexOperator::from_fn(c.len(), |m, mp| {
                x.get(mp, m) * (c[m] * c[mp])
            })),
        }
    }

    /// `Tr₂[(1 ⊗ B) R]`, the operator on `H` whose overlap with `P_n` gives
    /// the joint probability `Tr[(P_n ⊗ B) R]`.
    pub fn tomographer_effect(&self, b: &ComplexOperator) -> Result<ComplexOperator> {
        if b.dim() != self.dim_tomo {
            return Err(Error::DimensionMismatch(format!(
                "tomographer operator has dim {}, state expects {}",
                b.dim(),
                self.dim_tomo
            )));
        }
        match &self.repr {
            StateRepr::Dense(rho) => {
                let big = &ComplexOperator::identity(self.dim_system).tensor_product(b) * rho;
                big.partial_trace_second(self.dim_tomo)
            }
            // E[m', m] = c_m c_m' B[m, m']
            StateRepr::Schmidt(c) => Ok(ComplexOperator::from_fn(c.len(), |mp, m| {
                b.get(m, mp) * (c[m] * c[mp])
            })),
        }
    }

    /// Reduced state on the tomographer side, `Tr₁[R]`.
    pub fn reduced_tomographer(&self) -> Result<ComplexOperator> {
        self.apply_map(&ComplexOperator::identity(self.dim_system))
    }

    /// `⟨m p| R |m p⟩`: the action of the map on diagonal operators.
    pub fn diagonal_response(&self) -> DMatrix<f64> {
        match &self.repr {
            StateRepr::Dense(rho) => DMatrix::from_fn(self.dim_tomo, self.dim_system, |p, m| {
                let idx = m * self.dim_tomo + p;
                rho.get(idx, idx).re
            }),
            StateRepr::Schmidt(c) => {
                DMatrix::from_fn(c.len(), c.len(), |p, m| if p == m { c[m] * c[m] } else { 0.0 })
            }
        }
    }

    fn check_system_dim(&self, x: &ComplexOperator) -> Result<()> {
        if x.dim() != self.dim_system {
            return Err(Error::DimensionMismatch(format!(
                "system operator has dim {}, state expects {}",
                x.dim(),
                self.dim_system
            )));
        }
        Ok(())
    }
}

/// `|Ψ⟩ = Σ_i |i⟩|i⟩ / √d`.
pub fn maximally_entangled(d: usize) -> Result<BipartiteState> {
    if d < 2 {
        return Err(Error::Validation(format!("maximally entangled state needs d >= 2, got {d}")));
    }
    let c = vec![1.0 / (d as f64).sqrt(); d];
    Ok(BipartiteState { dim_system: d, dim_tomo: d, repr: StateRepr::Schmidt(c), truncation_deficit: 0.0 })
}

/// Twin beam `∝ Σ_m ξ^m |m⟩|m⟩`, truncated at `fock_cutoff` and renormalized.
pub fn twin_beam(xi: f64, fock_cutoff: usize) -> Result<BipartiteState> {
    if !(0.0..1.0).contains(&xi) {
        return Err(Error::Unnormalizable { xi });
    }
    let d = fock_cutoff + 1;
    let x2 = xi * xi;
    // untruncated weights (1-ξ²)ξ^{2m}; the tail beyond the cutoff is ξ^{2(M+1)}
    let deficit = x2.powi(d as i32);
    let mut c: Vec<f64> = (0..d).map(|m| ((1.0 - x2) * x2.powi(m as i32)).sqrt()).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    c.iter_mut().for_each(|v| *v /= norm);
    Ok(BipartiteState { dim_system: d, dim_tomo: d, repr: StateRepr::Schmidt(c), truncation_deficit: deficit })
}

/// Which operators the map acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSubspace {
    /// All operators; vectorized row-major, `dim_tomo² × dim_system²`.
    Full,
    /// Diagonal operators in the computational/Fock basis, `dim_tomo × dim_system`.
    Diagonal,
}

pub const DEFAULT_SVD_TOLERANCE: f64 = 1e-10;

/// Vectorized representation of `X ↦ Tr₁[(X ⊗ 1) R]` with its SVD
/// pseudo-inverse.
#[derive(Clone, Debug)]
pub struct MapROperator {
    pub subspace: MapSubspace,
    pub dim_system: usize,
    pub dim_tomo: usize,
    pub matrix: DMatrix<C64>,
    pub pseudo_inverse: DMatrix<C64>,
    pub singular_values: Vec<f64>,
    pub svd_tolerance: f64,
    /// Infinite when the map is not injective on the subspace.
    pub condition_number: f64,
}

impl MapROperator {
    pub fn is_faithful(&self) -> bool {
        self.condition_number.is_finite()
    }

    /// Applies the map to a system-side operator.
    pub fn apply(&self, x: &ComplexOperator) -> Result<ComplexOperator> {
        if x.dim() != self.dim_system {
            return Err(Error::DimensionMismatch(format!(
                "map expects system dim {}, got {}",
                self.dim_system,
                x.dim()
            )));
        }
        match self.subspace {
            MapSubspace::Full => ComplexOperator::from_vectorized(&(&self.matrix * x.vectorize())),
            MapSubspace::Diagonal => {
                let v = DVector::from_iterator(self.dim_system, x.diagonal_real().into_iter().map(C64::from));
                let y = &self.matrix * v;
                Ok(ComplexOperator::from_real_diagonal(&y.iter().map(|z| z.re).collect::<Vec<_>>()))
            }
        }
    }

    /// `R⁻¹(y)` through the pseudo-inverse. On the diagonal subspace only the
    /// diagonal of `y` is read.
    pub fn invert(&self, y: &ComplexOperator) -> Result<ComplexOperator> {
        if y.dim() != self.dim_tomo {
            return Err(Error::DimensionMismatch(format!(
                "map expects tomographer dim {}, got {}",
                self.dim_tomo,
                y.dim()
            )));
        }
        match self.subspace {
            MapSubspace::Full => ComplexOperator::from_vectorized(&(&self.pseudo_inverse * y.vectorize())),
            MapSubspace::Diagonal => Ok(ComplexOperator::from_real_diagonal(&self.invert_diagonal(&y.diagonal_real())?)),
        }
    }

    pub fn invert_diagonal(&self, y: &[f64]) -> Result<Vec<f64>> {
        if self.subspace != MapSubspace::Diagonal {
            return Err(Error::UnsupportedStructure("invert_diagonal on a full map".into()));
        }
        if y.len() != self.dim_tomo {
            return Err(Error::DimensionMismatch(format!(
                "map expects {} diagonal entries, got {}",
                self.dim_tomo,
                y.len()
            )));
        }
        let v = DVector::from_iterator(y.len(), y.iter().copied().map(C64::from));
        Ok((&self.pseudo_inverse * v).iter().map(|z| z.re).collect())
    }

    /// Linear propagation of independent per-entry standard errors on the
    /// diagonal of `y` through the pseudo-inverse.
    pub fn propagate_diagonal_stderr(&self, sigma: &[f64]) -> Vec<f64> {
        (0..self.pseudo_inverse.nrows())
            .map(|m| {
                sigma
                    .iter()
                    .enumerate()
                    .map(|(p, s)| self.pseudo_inverse[(m, p)].norm_sqr() * s * s)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Linear propagation of independent real/imaginary standard errors
    /// (packed as `re`/`im` of each entry) through the full pseudo-inverse.
    pub fn propagate_full_stderr(&self, sigma: &ComplexOperator) -> ComplexOperator {
        let s = sigma.vectorize();
        let pinv = &self.pseudo_inverse;
        let out = DVector::from_fn(pinv.nrows(), |k, _| {
            let (mut vr, mut vi) = (0.0, 0.0);
            for j in 0..pinv.ncols() {
                let a = pinv[(k, j)];
                vr += a.re * a.re * s[j].re * s[j].re + a.im * a.im * s[j].im * s[j].im;
                vi += a.im * a.im * s[j].re * s[j].re + a.re * a.re * s[j].im * s[j].im;
            }
            C64::new(vr.sqrt(), vi.sqrt())
        });
        ComplexOperator::from_vectorized(&out).expect("square by construction")
    }
}

/// Builds the full vectorized map and its pseudo-inverse.
pub fn build_map_r(state: &BipartiteState, svd_tolerance: f64) -> Result<MapROperator> {
    let (ds, dt) = (state.dim_system, state.dim_tomo);
    let mut matrix = DMatrix::<C64>::zeros(dt * dt, ds * ds);
    for i in 0..ds {
        for j in 0..ds {
            let mut e = ComplexOperator::zeros(ds);
            e.set(i, j, C64::new(1.0, 0.0));
            let y = state.apply_map(&e)?.vectorize();
            matrix.set_column(i * ds + j, &y);
        }
    }
    Ok(finish_map(MapSubspace::Full, ds, dt, matrix, svd_tolerance, ds * ds))
}

/// Builds the map restricted to diagonal operators.
pub fn build_diagonal_map_r(state: &BipartiteState, svd_tolerance: f64) -> MapROperator {
    let (ds, dt) = (state.dim_system, state.dim_tomo);
    let matrix = state.diagonal_response().map(C64::from);
    finish_map(MapSubspace::Diagonal, ds, dt, matrix, svd_tolerance, ds)
}

fn finish_map(
    subspace: MapSubspace,
    dim_system: usize,
    dim_tomo: usize,
    matrix: DMatrix<C64>,
    svd_tolerance: f64,
    required_rank: usize,
) -> MapROperator {
    let pinv = pseudo_inverse(&matrix, svd_tolerance);
    let condition_number = pinv.condition_number(required_rank);
    MapROperator {
        subspace,
        dim_system,
        dim_tomo,
        matrix,
        pseudo_inverse: pinv.inverse,
        singular_values: pinv.singular_values,
        svd_tolerance,
        condition_number,
    }
}

/// `Tr[R²]`
pub fn purity(state: &BipartiteState) -> f64 {
    match &state.repr {
        StateRepr::Schmidt(c) => c.iter().map(|v| v * v).sum::<f64>().powi(2),
        StateRepr::Dense(rho) => (rho * rho).trace().re,
    }
}

/// `|0⟩⟨0|` on `dim` levels.
pub fn ground_state(dim: usize) -> ComplexOperator {
    let mut rho = ComplexOperator::zeros(dim);
    if dim > 0 {
        rho.set(0, 0, C64::new(1.0, 0.0));
    }
    rho
}

/// `I/d`.
pub fn maximally_mixed(dim: usize) -> ComplexOperator {
    ComplexOperator::identity(dim).scale_real(1.0 / dim as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_operator(d: usize, seed: u64) -> ComplexOperator {
        // small LCG; these tests only need generic entries
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        ComplexOperator::from_fn(d, |_, _| C64::new(next(), next()))
    }

    #[test]
    fn bell_state_layout() {
        let rho = maximally_entangled(2).unwrap().density_matrix();
        for i in 0..4 {
            for j in 0..4 {
                let corner = (i == 0 || i == 3) && (j == 0 || j == 3);
                let expect = if corner { 0.5 } else { 0.0 };
                assert!((rho.get(i, j) - C64::new(expect, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn maximally_entangled_reduced_state_and_purity() {
        for d in 2..6 {
            let s = maximally_entangled(d).unwrap();
            let dense = s.density_matrix();
            let red = dense.partial_trace_first(d).unwrap();
            assert!(red.max_abs_diff(&maximally_mixed(d)) < 1e-14);
            assert!((purity(&s) - 1.0).abs() < 1e-14);
            assert!(((&dense * &dense).trace().re - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn maximally_entangled_rejects_d1() {
        assert!(maximally_entangled(1).is_err());
    }

    #[test]
    fn twin_beam_vacuum_limit() {
        let s = twin_beam(0.0, 5).unwrap();
        let w = s.schmidt_weights().unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w[1..].iter().all(|&v| v == 0.0));
        assert_eq!(s.truncation_deficit, 0.0);
    }

    #[test]
    fn twin_beam_weights_and_mean_photon_number() {
        let xi: f64 = 0.88;
        let s = twin_beam(xi, 200).unwrap();
        let w = s.schmidt_weights().unwrap();
        for m in 0..10 {
            let expect = (1.0 - 0.7744) * 0.7744_f64.powi(m as i32);
            assert!((w[m] - expect).abs() < 1e-12, "m={m}");
        }
        let mean: f64 = w.iter().enumerate().map(|(m, v)| m as f64 * v).sum();
        assert!((mean - 3.432624113475177).abs() < 1e-9, "mean {mean}");
    }

    #[test]
    fn twin_beam_truncation_deficit_is_geometric_tail() {
        for &(xi, m) in &[(0.88_f64, 54usize), (0.5, 10), (0.3, 3)] {
            let s = twin_beam(xi, m).unwrap();
            // independent: sum the explicit tail
            let tail: f64 = ((m + 1)..5000).map(|k| (1.0 - xi * xi) * (xi * xi).powi(k as i32)).sum();
            assert!((s.truncation_deficit - tail).abs() < 1e-12);
            let total: f64 = s.schmidt_weights().unwrap().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(twin_beam(0.88, 54).unwrap().truncation_deficit < 1e-6);
    }

    #[test]
    fn twin_beam_rejects_unnormalizable() {
        assert!(matches!(twin_beam(1.0, 5), Err(Error::Unnormalizable { .. })));
        assert!(matches!(twin_beam(-0.1, 5), Err(Error::Unnormalizable { .. })));
    }

    #[test]
    fn schmidt_map_matches_dense_partial_trace() {
        let s = twin_beam(0.6, 3).unwrap();
        let dense = BipartiteState::from_density(s.density_matrix(), 4, 4).unwrap();
        let x = random_operator(4, 3);
        let a = s.apply_map(&x).unwrap();
        let b = dense.apply_map(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
        let y = random_operator(4, 4);
        let a = s.tomographer_effect(&y).unwrap();
        let b = dense.tomographer_effect(&y).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn maximally_entangled_map_is_scaled_transpose() {
        let d = 3;
        let s = maximally_entangled(d).unwrap();
        let map = build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap();
        // brute-force matrix of X ↦ Xᵀ/d in row-major vectorization
        for i in 0..d * d {
            for j in 0..d * d {
                let (a, b) = (i / d, i % d);
                let expect = if j == b * d + a { 1.0 / d as f64 } else { 0.0 };
                assert!((map.matrix[(i, j)] - C64::new(expect, 0.0)).norm() < 1e-15);
            }
        }
        assert!((map.condition_number - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maximally_entangled_inversion() {
        let s = maximally_entangled(2).unwrap();
        let map = build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap();
        let x = map.invert(&maximally_mixed(2)).unwrap();
        assert!(x.max_abs_diff(&ComplexOperator::identity(2)) < 1e-14);

        let s = maximally_entangled(4).unwrap();
        let map = build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap();
        let x = random_operator(4, 11);
        let y = x.transpose().scale_real(0.25);
        assert!(map.invert(&y).unwrap().max_abs_diff(&x) < 1e-13);
    }

    #[test]
    fn dense_round_trip_on_generic_state() {
        // a full-rank mixed state of two qutrits is faithful
        let d = 3;
        let a = random_operator(d * d, 21);
        let rho = (&a * &a.adjoint()).hermitian_part();
        let rho = rho.scale_real(1.0 / rho.trace().re);
        let s = BipartiteState::from_density(rho, d, d).unwrap();
        let map = build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap();
        assert!(map.is_faithful());
        let x = random_operator(d, 22).hermitian_part();
        let y = s.apply_map(&x).unwrap();
        assert!(map.apply(&x).unwrap().max_abs_diff(&y) < 1e-12);
        let back = map.invert(&y).unwrap();
        assert!(back.max_abs_diff(&x) / x.frobenius_norm() < 1e-8);
    }

    #[test]
    fn twin_beam_diagonal_action_and_condition() {
        let xi: f64 = 0.88;
        let m_cut = 20;
        let s = twin_beam(xi, m_cut).unwrap();
        let w = s.schmidt_weights().unwrap();
        let map = build_diagonal_map_r(&s, DEFAULT_SVD_TOLERANCE);
        let x: Vec<f64> = (0..=m_cut).map(|m| 1.0 + m as f64).collect();
        let y = map.apply(&ComplexOperator::from_real_diagonal(&x)).unwrap().diagonal_real();
        for m in 0..=m_cut {
            assert!((y[m] - w[m] * x[m]).abs() < 1e-15);
        }
        let expected_cond = (xi * xi).powi(-(m_cut as i32));
        assert!((map.condition_number / expected_cond - 1.0).abs() < 1e-10);
        let back = map.invert_diagonal(&y).unwrap();
        for m in 0..=m_cut {
            assert!((back[m] - x[m]).abs() / x[m] < 1e-10);
        }
    }

    #[test]
    fn vacuum_twin_beam_is_not_faithful() {
        let s = twin_beam(0.0, 4).unwrap();
        assert!(build_diagonal_map_r(&s, DEFAULT_SVD_TOLERANCE).condition_number.is_infinite());
        let map = build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap();
        assert!(map.condition_number.is_infinite());
        assert!(!map.is_faithful());
    }

    #[test]
    fn product_state_is_not_faithful() {
        let s = BipartiteState::product(&maximally_mixed(2), &ground_state(2)).unwrap();
        let map = build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap();
        assert!(!map.is_faithful());
    }

    #[test]
    fn from_density_validates() {
        let bad = ComplexOperator::from_real_diagonal(&[0.5, 0.5, 0.5, -0.5]);
        assert!(BipartiteState::from_density(bad, 2, 2).is_err());
        assert!(BipartiteState::from_density(maximally_mixed(4), 2, 3).is_err());
    }
}
