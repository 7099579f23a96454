//! The averaging strategy: estimate each conditioned tomographer state `ρ_n`
//! by averaging dual (or kernel) functions over the records with detector
//! outcome `n`, then recover `P_n = p(n) R⁻¹(ρ_n)`.
//!
//! Estimates are raw linear inversions; they are not forced onto the POVM
//! cone. [`post_project`] exists for callers that need a valid POVM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{povm_report, Povm, PovmReport};
use crate::error::{Error, Result};
use crate::qmath::{hermitian_function, ComplexOperator, C64};
use crate::quorum::{DualSet, FiniteQuorum, HomodyneQuorum, NoiseMap};
use crate::sampler::{Dataset, DatasetKind, FrequencyTable, Reading};
use crate::states::{MapROperator, MapSubspace};

/// Clipped fraction of homodyne records above which a warning is emitted.
pub const CLIP_WARNING_FRACTION: f64 = 1e-3;

const REDUCTION_CHUNK: usize = 8192;

/// Conditioned tomographer state for one detector outcome.
///
/// `stderr` packs the standard errors of real and imaginary parts into the
/// real and imaginary parts of each entry. In the homodyne case only the
/// diagonals of `rho` and `stderr` are populated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionedEstimate {
    pub outcome: usize,
    pub p_hat: f64,
    pub p_stderr: f64,
    /// Records behind the estimate; `None` for exact probabilities.
    pub count: Option<u64>,
    pub rho: ComplexOperator,
    pub stderr: ComplexOperator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionedSet {
    pub estimates: Vec<ConditionedEstimate>,
    /// Outcomes in range that never occurred; no estimate is produced.
    pub unobserved: Vec<usize>,
    pub n_records: Option<u64>,
    /// Homodyne records that fell outside the kernel grid.
    pub clipped: u64,
    pub warnings: Vec<String>,
}

/// Averages rescaled duals `K·C_j` (K = number of settings) over the
/// records of each outcome.
pub fn estimate_conditioned_finite(
    data: &Dataset,
    quorum: &FiniteQuorum,
    duals: &DualSet,
    noise: Option<&NoiseMap>,
) -> Result<ConditionedSet> {
    let table = FrequencyTable::from_dataset(data, quorum, data.counts_by_n.len())?;
    estimate_conditioned_from_table(&table, duals, noise)
}

/// Same estimator driven by a frequency table; with an exact table this is
/// the infinite-data limit and all standard errors vanish.
pub fn estimate_conditioned_from_table(
    table: &FrequencyTable,
    duals: &DualSet,
    noise: Option<&NoiseMap>,
) -> Result<ConditionedSet> {
    let n_proj = table.projector_setting.len();
    if duals.duals.len() != n_proj {
        return Err(Error::DimensionMismatch(format!(
            "{} duals for {} quorum projectors",
            duals.duals.len(),
            n_proj
        )));
    }
    let duals = match noise {
        Some(n) => duals.with_noise(n),
        None => duals.clone(),
    };
    let d = duals.duals[0].dim();
    let k = table.n_settings as f64;
    let marginal = table.outcome_marginal();
    let mut estimates = Vec::new();
    let mut unobserved = Vec::new();
    for (n, row) in table.freq.iter().enumerate() {
        let p = marginal[n];
        if p <= 0.0 {
            unobserved.push(n);
            continue;
        }
        let mut mean = ComplexOperator::zeros(d);
        let mut second = vec![(0.0, 0.0); d * d];
        for (j, f) in row.iter().enumerate() {
            if *f == 0.0 {
                continue;
            }
            let g = f / p;
            let y = duals.duals[j].scale_real(k);
            mean = &mean + &y.scale_real(g);
            for a in 0..d {
                for b in 0..d {
                    let z = y.get(a, b);
                    let s = &mut second[a * d + b];
                    s.0 += g * z.re * z.re;
                    s.1 += g * z.im * z.im;
                }
            }
        }
        let count = table.sample_size.map(|s| (p * s as f64).round() as u64);
        let stderr = match count {
            Some(c) => ComplexOperator::from_fn(d, |a, b| {
                let m = mean.get(a, b);
                let (sr, si) = second[a * d + b];
                let c = c as f64;
                C64::new(((sr - m.re * m.re).max(0.0) / c).sqrt(), ((si - m.im * m.im).max(0.0) / c).sqrt())
            }),
            None => ComplexOperator::zeros(d),
        };
        let p_stderr = table.sample_size.map_or(0.0, |s| (p * (1.0 - p) / s as f64).sqrt());
        estimates.push(ConditionedEstimate { outcome: n, p_hat: p, p_stderr, count, rho: mean, stderr });
    }
    let mut warnings = Vec::new();
    if !unobserved.is_empty() {
        warnings.push(format!("outcomes {unobserved:?} never occurred; their elements are not estimated"));
    }
    Ok(ConditionedSet { estimates, unobserved, n_records: table.sample_size, clipped: 0, warnings })
}

#[derive(Clone)]
struct KernelSums {
    count: Vec<u64>,
    sum: Vec<Vec<f64>>,
    sum_sq: Vec<Vec<f64>>,
    clipped: u64,
}

impl KernelSums {
    fn new(n_outcomes: usize, width: usize) -> Self {
        Self {
            count: vec![0; n_outcomes],
            sum: vec![vec![0.0; width]; n_outcomes],
            sum_sq: vec![vec![0.0; width]; n_outcomes],
            clipped: 0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.clipped += other.clipped;
        for n in 0..self.count.len() {
            self.count[n] += other.count[n];
            for m in 0..self.sum[n].len() {
                self.sum[n][m] += other.sum[n][m];
                self.sum_sq[n][m] += other.sum_sq[n][m];
            }
        }
        self
    }
}

/// Diagonal conditioned states from homodyne records: `⟨m|ρ̂_n|m⟩` is the
/// mean of `K_m(x)` over the records with outcome `n`.
pub fn estimate_conditioned_homodyne(data: &Dataset, hq: &HomodyneQuorum) -> Result<ConditionedSet> {
    if data.kind != DatasetKind::Homodyne {
        return Err(Error::UnsupportedStructure("homodyne estimator needs a homodyne dataset".into()));
    }
    let n_out = data.counts_by_n.len();
    let width = hq.fock_cutoff + 1;
    // Fixed chunks merged left to right keep the sum order independent of
    // the thread count.
    let partials: Vec<KernelSums> = data
        .records
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut acc = KernelSums::new(n_out, width);
            let mut buf = vec![0.0; width];
            for r in chunk {
                let Reading::Quadrature(x) = r.result else { continue };
                if !hq.kernels.eval_into(x, &mut buf) {
                    acc.clipped += 1;
                }
                acc.count[r.outcome] += 1;
                for (m, v) in buf.iter().enumerate() {
                    acc.sum[r.outcome][m] += v;
                    acc.sum_sq[r.outcome][m] += v * v;
                }
            }
            acc
        })
        .collect();
    let totals = partials.into_iter().fold(KernelSums::new(n_out, width), KernelSums::merge);
    let n_total = data.len() as f64;
    let mut estimates = Vec::new();
    let mut unobserved = Vec::new();
    for n in 0..n_out {
        let c = totals.count[n];
        if c == 0 {
            unobserved.push(n);
            continue;
        }
        let cf = c as f64;
        let mean: Vec<f64> = totals.sum[n].iter().map(|s| s / cf).collect();
        let se: Vec<f64> = totals.sum_sq[n]
            .iter()
            .zip(&mean)
            .map(|(sq, mu)| {
                let var = if c > 1 { (sq - cf * mu * mu).max(0.0) / (cf - 1.0) } else { 0.0 };
                (var / cf).sqrt()
            })
            .collect();
        let p = cf / n_total;
        estimates.push(ConditionedEstimate {
            outcome: n,
            p_hat: p,
            p_stderr: (p * (1.0 - p) / n_total).sqrt(),
            count: Some(c),
            rho: ComplexOperator::from_real_diagonal(&mean),
            stderr: ComplexOperator::from_real_diagonal(&se),
        });
    }
    let mut warnings = Vec::new();
    let frac = totals.clipped as f64 / n_total.max(1.0);
    if frac > CLIP_WARNING_FRACTION {
        warnings.push(format!(
            "{} of {} quadrature samples ({:.2e}) fell outside the kernel grid",
            totals.clipped,
            data.len(),
            frac
        ));
    }
    if !unobserved.is_empty() {
        warnings.push(format!("outcomes {unobserved:?} never occurred; their elements are not estimated"));
    }
    Ok(ConditionedSet { estimates, unobserved, n_records: Some(data.len() as u64), clipped: totals.clipped, warnings })
}

/// Infinite-data limit of [`estimate_conditioned_homodyne`] for a
/// Schmidt-form state and diagonal detector: the record average is replaced
/// by `∫K_m q_j` on the kernel grid, so the only error left is the kernel
/// residual.
pub fn exact_conditioned_homodyne(
    state: &crate::states::BipartiteState,
    povm: &Povm,
    hq: &HomodyneQuorum,
) -> Result<ConditionedSet> {
    let w = state
        .schmidt_weights()
        .ok_or_else(|| Error::UnsupportedStructure("exact homodyne mode needs a Schmidt-form state".into()))?;
    if !povm.is_diagonal() || povm.dim != w.len() || hq.fock_cutoff + 1 != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "state cutoff {}, POVM dim {}, kernel cutoff {} must agree on a diagonal POVM",
            w.len() - 1,
            povm.dim,
            hq.fock_cutoff
        )));
    }
    let width = w.len();
    let dens = hq.densities();
    let grid = &hq.kernels.grid;
    // moments[m][j] = ∫ K_m q_j
    let mut moments = vec![vec![0.0; width]; width];
    let mut q = vec![0.0; width];
    for (i, k) in hq.kernels.values.iter().enumerate() {
        dens.eval_into(grid.point(i), &mut q);
        for (m, km) in k.iter().enumerate() {
            for (j, qj) in q.iter().enumerate() {
                moments[m][j] += grid.step * km * qj;
            }
        }
    }
    let mut estimates = Vec::new();
    let mut unobserved = Vec::new();
    for (n, diag) in povm.diagonals().iter().enumerate() {
        let joint: Vec<f64> = diag.iter().zip(&w).map(|(p, w)| p * w).collect();
        let p: f64 = joint.iter().sum();
        if p <= 0.0 {
            unobserved.push(n);
            continue;
        }
        let rho: Vec<f64> = moments.iter().map(|row| row.iter().zip(&joint).map(|(a, b)| a * b).sum::<f64>() / p).collect();
        estimates.push(ConditionedEstimate {
            outcome: n,
            p_hat: p,
            p_stderr: 0.0,
            count: None,
            rho: ComplexOperator::from_real_diagonal(&rho),
            stderr: ComplexOperator::zeros(width),
        });
    }
    Ok(ConditionedSet { estimates, unobserved, n_records: None, clipped: 0, warnings: Vec::new() })
}

/// One recovered element with linearly propagated standard errors (real
/// and imaginary parts packed as in [`ConditionedEstimate`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredElement {
    pub outcome: usize,
    pub value: ComplexOperator,
    pub stderr: ComplexOperator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredPovm {
    pub subspace: MapSubspace,
    pub elements: Vec<RecoveredElement>,
    pub unobserved: Vec<usize>,
    /// Invariant diagnostics of the raw estimate (never enforced here).
    pub report: PovmReport,
    pub warnings: Vec<String>,
}

impl RecoveredPovm {
    pub fn element(&self, outcome: usize) -> Option<&RecoveredElement> {
        self.elements.iter().find(|e| e.outcome == outcome)
    }
}

/// `P̂_n = p̂_n R⁻¹(ρ̂_n)`. Errors combine the propagated state errors with
/// the binomial error of `p̂_n`.
pub fn recover_povm(set: &ConditionedSet, map: &MapROperator) -> Result<RecoveredPovm> {
    let mut elements = Vec::with_capacity(set.estimates.len());
    for est in &set.estimates {
        let (x, sx) = match map.subspace {
            MapSubspace::Full => (map.invert(&est.rho)?, map.propagate_full_stderr(&est.stderr)),
            MapSubspace::Diagonal => {
                let x = map.invert_diagonal(&est.rho.diagonal_real())?;
                let s = map.propagate_diagonal_stderr(&est.stderr.diagonal_real());
                (ComplexOperator::from_real_diagonal(&x), ComplexOperator::from_real_diagonal(&s))
            }
        };
        let (p, sp) = (est.p_hat, est.p_stderr);
        let combine = |v: f64, s: f64| ((p * s).powi(2) + (v * sp).powi(2)).sqrt();
        let d = x.dim();
        let stderr = ComplexOperator::from_fn(d, |a, b| {
            let (v, s) = (x.get(a, b), sx.get(a, b));
            C64::new(combine(v.re, s.re), combine(v.im, s.im))
        });
        elements.push(RecoveredElement { outcome: est.outcome, value: x.scale_real(p), stderr });
    }
    let ops: Vec<ComplexOperator> = elements.iter().map(|e| e.value.clone()).collect();
    let report = povm_report(map.dim_system, &ops);
    Ok(RecoveredPovm {
        subspace: map.subspace,
        elements,
        unobserved: set.unobserved.clone(),
        report,
        warnings: set.warnings.clone(),
    })
}

/// Nearest-valid repair of a raw estimate: Hermitian part, negative
/// eigenvalues clipped, then `S^{-1/2} P_n S^{-1/2}` with `S = Σ P_n`.
pub fn post_project(recovered: &RecoveredPovm) -> Result<Povm> {
    let clipped: Vec<ComplexOperator> =
        recovered.elements.iter().map(|e| hermitian_function(&e.value.hermitian_part(), |v| v.max(0.0))).collect();
    let d = clipped.first().map(|e| e.dim()).ok_or_else(|| Error::Validation("no elements to project".into()))?;
    let sum = clipped.iter().fold(ComplexOperator::zeros(d), |acc, e| &acc + e);
    let inv_sqrt = hermitian_function(&sum, |v| if v > 1e-14 { v.powf(-0.5) } else { 0.0 });
    let elements = clipped.iter().map(|e| (&(&inv_sqrt * e) * &inv_sqrt).hermitian_part()).collect();
    Povm::new_unchecked(elements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{computational_basis, noisy_photocounter, projective_povm, random_povm};
    use crate::quorum::{compute_dual_set, pauli_quorum, random_quorum, KernelGrid};
    use crate::sampler::{sample_finite, sample_homodyne_twinbeam};
    use crate::states::{build_diagonal_map_r, build_map_r, maximally_entangled, twin_beam, DEFAULT_SVD_TOLERANCE};

    #[test]
    fn exact_conditioned_states_match_definition() {
        let s = maximally_entangled(3).unwrap();
        let povm = random_povm(3, 4, 7).unwrap();
        let q = random_quorum(3, 4, 8).unwrap();
        let table = FrequencyTable::exact(&s, &povm, &q, None).unwrap();
        let set = estimate_conditioned_from_table(&table, &compute_dual_set(&q).unwrap(), None).unwrap();
        for e in &set.estimates {
            let joint = s.apply_map(&povm.elements[e.outcome]).unwrap();
            let p = joint.trace().re;
            assert!((e.p_hat - p).abs() < 1e-12);
            assert!(e.rho.max_abs_diff(&joint.scale_real(1.0 / p)) < 1e-10);
        }
    }

    #[test]
    fn exact_round_trip_recovers_povm() {
        let s = maximally_entangled(2).unwrap();
        let povm = random_povm(2, 3, 1).unwrap();
        let q = pauli_quorum();
        let table = FrequencyTable::exact(&s, &povm, &q, None).unwrap();
        let set = estimate_conditioned_from_table(&table, &compute_dual_set(&q).unwrap(), None).unwrap();
        let rec = recover_povm(&set, &build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap()).unwrap();
        for e in &rec.elements {
            assert!(e.value.max_abs_diff(&povm.elements[e.outcome]) < 1e-8);
        }
        assert!(rec.report.completeness_deviation < 1e-8);
    }

    #[test]
    fn noisy_tomographer_is_corrected() {
        let s = maximally_entangled(2).unwrap();
        let povm = random_povm(2, 3, 4).unwrap();
        let q = pauli_quorum();
        let noise = NoiseMap::depolarizing(2, 0.3, 1e12).unwrap();
        let table = FrequencyTable::exact(&s, &povm, &q, Some(&noise)).unwrap();
        let set = estimate_conditioned_from_table(&table, &compute_dual_set(&q).unwrap(), Some(&noise)).unwrap();
        let rec = recover_povm(&set, &build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap()).unwrap();
        for e in &rec.elements {
            assert!(e.value.max_abs_diff(&povm.elements[e.outcome]) < 1e-8);
        }
    }

    #[test]
    fn trivial_povm_gives_reduced_state() {
        let s = maximally_entangled(2).unwrap();
        let povm = Povm::new(vec![ComplexOperator::identity(2)]).unwrap();
        let q = pauli_quorum();
        let data = sample_finite(&s, &povm, &q, None, 20_000, 2, "t").unwrap();
        let set = estimate_conditioned_finite(&data, &q, &compute_dual_set(&q).unwrap(), None).unwrap();
        assert_eq!(set.estimates.len(), 1);
        let e = &set.estimates[0];
        assert_eq!(e.p_hat, 1.0);
        let reduced = s.reduced_tomographer().unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let diff = e.rho.get(a, b) - reduced.get(a, b);
                let se = e.stderr.get(a, b);
                assert!(diff.re.abs() <= 5.0 * se.re + 1e-12 && diff.im.abs() <= 5.0 * se.im + 1e-12);
            }
        }
        let rec = recover_povm(&set, &build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap()).unwrap();
        let el = &rec.elements[0];
        let id = ComplexOperator::identity(2);
        for a in 0..2 {
            for b in 0..2 {
                let diff = el.value.get(a, b) - id.get(a, b);
                assert!(diff.re.abs() <= 5.0 * el.stderr.get(a, b).re + 1e-12);
            }
        }
    }

    #[test]
    fn unobserved_outcomes_are_omitted() {
        let s = maximally_entangled(2).unwrap();
        let povm = Povm::new(vec![ComplexOperator::identity(2), ComplexOperator::zeros(2)]).unwrap();
        let q = pauli_quorum();
        let table = FrequencyTable::exact(&s, &povm, &q, None).unwrap();
        let set = estimate_conditioned_from_table(&table, &compute_dual_set(&q).unwrap(), None).unwrap();
        assert_eq!(set.unobserved, vec![1]);
        assert_eq!(set.estimates.len(), 1);
        assert!(!set.warnings.is_empty());
    }

    #[test]
    fn bell_sampling_is_projective_in_z() {
        let s = maximally_entangled(2).unwrap();
        let povm = projective_povm(&computational_basis(2)).unwrap();
        let q = pauli_quorum();
        let data = sample_finite(&s, &povm, &q, None, 30_000, 9, "t").unwrap();
        let set = estimate_conditioned_finite(&data, &q, &compute_dual_set(&q).unwrap(), None).unwrap();
        let rec = recover_povm(&set, &build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap()).unwrap();
        for e in &rec.elements {
            let truth = &povm.elements[e.outcome];
            for a in 0..2 {
                for b in 0..2 {
                    let d = e.value.get(a, b) - truth.get(a, b);
                    let se = e.stderr.get(a, b);
                    assert!(d.re.abs() < 5.0 * se.re + 1e-9, "{a}{b}: {d} vs {se}");
                    assert!(d.im.abs() < 5.0 * se.im + 1e-9, "{a}{b}: {d} vs {se}");
                }
            }
        }
    }

    fn small_hq(cutoff: usize, eta: f64) -> HomodyneQuorum {
        HomodyneQuorum::new(eta, cutoff, KernelGrid::default(), 0.0).unwrap()
    }

    #[test]
    fn ideal_counter_conditions_on_photon_number() {
        let cutoff = 12;
        let s = twin_beam(0.6, cutoff).unwrap();
        let povm = noisy_photocounter(1.0, 0.0, cutoff, 0).unwrap();
        let hq = small_hq(cutoff, 0.9);
        let data = sample_homodyne_twinbeam(&s, &povm, 0.9, 100_000, 21, "t").unwrap();
        let set = estimate_conditioned_homodyne(&data, &hq).unwrap();
        let mut inside = 0;
        let mut total = 0;
        for e in set.estimates.iter().filter(|e| e.outcome <= 3) {
            for m in 0..=5 {
                let target = if m == e.outcome { 1.0 } else { 0.0 };
                let dev = (e.rho.get(m, m).re - target).abs();
                total += 1;
                if dev < 5.0 * e.stderr.get(m, m).re {
                    inside += 1;
                }
            }
        }
        assert_eq!(inside, total);
        assert_eq!(set.clipped, 0);
    }

    #[test]
    fn vacuum_homodyne_estimate() {
        let s = twin_beam(0.0, 6).unwrap();
        let povm = noisy_photocounter(1.0, 0.0, 6, 0).unwrap();
        let hq = small_hq(6, 0.9);
        let data = sample_homodyne_twinbeam(&s, &povm, 0.9, 50_000, 3, "t").unwrap();
        let set = estimate_conditioned_homodyne(&data, &hq).unwrap();
        let e = &set.estimates[0];
        assert!((e.rho.get(0, 0).re - 1.0).abs() < 5.0 * e.stderr.get(0, 0).re);
    }

    #[test]
    fn diagonal_recovery_divides_by_weights() {
        let cutoff = 10;
        let xi: f64 = 0.5;
        let s = twin_beam(xi, cutoff).unwrap();
        let povm = noisy_photocounter(0.8, 1.0, cutoff, 30).unwrap();
        let hq = small_hq(cutoff, 0.9);
        let data = sample_homodyne_twinbeam(&s, &povm, 0.9, 5_000, 5, "t").unwrap();
        let set = estimate_conditioned_homodyne(&data, &hq).unwrap();
        let rec = recover_povm(&set, &build_diagonal_map_r(&s, DEFAULT_SVD_TOLERANCE)).unwrap();
        let w = s.schmidt_weights().unwrap();
        for (e, r) in set.estimates.iter().zip(&rec.elements) {
            for m in 0..=cutoff {
                let expect = e.p_hat * e.rho.get(m, m).re / w[m];
                assert!((r.value.get(m, m).re - expect).abs() < 1e-9 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn exact_homodyne_limit_is_within_kernel_residual() {
        let cutoff = 12;
        let s = twin_beam(0.7, cutoff).unwrap();
        let povm = noisy_photocounter(0.8, 1.0, cutoff, 30).unwrap();
        let hq = small_hq(cutoff, 0.9);
        let set = exact_conditioned_homodyne(&s, &povm, &hq).unwrap();
        let rec = recover_povm(&set, &build_diagonal_map_r(&s, DEFAULT_SVD_TOLERANCE)).unwrap();
        let w = s.schmidt_weights().unwrap();
        for e in &rec.elements {
            let p = set.estimates.iter().find(|c| c.outcome == e.outcome).unwrap().p_hat;
            for m in 0..=cutoff {
                let err = (e.value.get(m, m).re - povm.elements[e.outcome].get(m, m).re).abs();
                assert!(err <= hq.kernels.residual * p / w[m] + 1e-12, "n={} m={m}: {err}", e.outcome);
            }
        }
    }

    #[test]
    fn post_projection_yields_valid_povm() {
        let s = maximally_entangled(2).unwrap();
        let povm = random_povm(2, 3, 5).unwrap();
        let q = pauli_quorum();
        let data = sample_finite(&s, &povm, &q, None, 300, 1, "t").unwrap();
        let set = estimate_conditioned_finite(&data, &q, &compute_dual_set(&q).unwrap(), None).unwrap();
        let rec = recover_povm(&set, &build_map_r(&s, DEFAULT_SVD_TOLERANCE).unwrap()).unwrap();
        let fixed = post_project(&rec).unwrap();
        assert!(fixed.report().satisfies(1e-12, 1e-10, 1e-10));
    }
}
