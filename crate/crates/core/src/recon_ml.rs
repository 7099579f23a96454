//! Maximum-likelihood POVM reconstruction under `P_n ≥ 0`, `Σ_n P_n = 1`.
//!
//! The likelihood of the joint records is
//! `L = Σ_i log Tr[(P_{n_i} ⊗ B_i) R]`. Two problem shapes are supported:
//!
//! * finite quorums, where records are grouped into counts per
//!   `(outcome, projector)` and the iterate is a full POVM;
//! * Fock-diagonal detectors probed by homodyne detection, where each record
//!   contributes a response row `r_i[m] = w_m q_m(x_i)` and the iterate is a
//!   set of diagonals.
//!
//! Every accepted iterate satisfies the constraints and never lowers `L`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{Povm, PovmReport};
use crate::error::{Error, Result};
use crate::qmath::{hermitian_function, ComplexOperator};
use crate::quorum::{FiniteQuorum, NoiseMap, SmearedFockDensities};
use crate::sampler::{tomographer_effects, Dataset, DatasetKind, Reading, Setting};
use crate::states::BipartiteState;

/// Probabilities below this contribute `log(PROBABILITY_FLOOR)`.
pub const PROBABILITY_FLOOR: f64 = 1e-300;
/// Largest state weight allowed above the ML Fock cutoff.
pub const ML_TAIL_TOL: f64 = 1e-4;
pub const ML_COMPLETENESS_TOL: f64 = 1e-6;
pub const ML_POSITIVITY_TOL: f64 = 1e-8;

const ROW_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_iters: usize,
    /// Absolute log-likelihood gain below which iteration stops.
    pub min_ll_increase: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { max_iters: 20_000, min_ll_increase: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct DiagonalData {
    /// Response rows of width `dim`, concatenated, one block per POVM index.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct FiniteData {
    /// Tomographer effects `Tr₂[(1 ⊗ N(B_j)) R]` per flat projector index.
    pub effects: Vec<ComplexOperator>,
    /// `counts[index][j]`; fractional weights allow exact probabilities.
    pub counts: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum ProblemData {
    Diagonal(DiagonalData),
    Finite(FiniteData),
}

/// Likelihood data plus the outcome set being reconstructed.
#[derive(Clone, Debug)]
pub struct MlProblem {
    pub dim: usize,
    /// Detector outcome of each POVM index; `None` marks the catch-all
    /// element that absorbs unobserved outcomes.
    pub labels: Vec<Option<usize>>,
    pub n_records: u64,
    pub data: ProblemData,
}

fn outcome_labels(counts_by_n: &[u64]) -> Vec<Option<usize>> {
    let mut labels: Vec<Option<usize>> =
        counts_by_n.iter().enumerate().filter(|(_, c)| **c > 0).map(|(n, _)| Some(n)).collect();
    labels.push(None);
    labels
}

fn label_index(labels: &[Option<usize>]) -> Vec<usize> {
    let max = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut idx = vec![usize::MAX; max];
    for (i, l) in labels.iter().enumerate() {
        if let Some(n) = l {
            idx[*n] = i;
        }
    }
    idx
}

/// Diagonal problem for a Schmidt-form state and homodyne records, with
/// Fock levels `0..=ml_cutoff`.
pub fn build_problem_diagonal(
    data: &Dataset,
    state: &BipartiteState,
    eta_h: f64,
    ml_cutoff: usize,
) -> Result<MlProblem> {
    if data.kind != DatasetKind::Homodyne {
        return Err(Error::UnsupportedStructure("diagonal ML needs a homodyne dataset".into()));
    }
    let w = state
        .schmidt_weights()
        .ok_or_else(|| Error::UnsupportedStructure("diagonal ML needs a Schmidt-form state".into()))?;
    let dim = ml_cutoff + 1;
    if dim > w.len() {
        return Err(Error::DimensionMismatch(format!(
            "ML cutoff {ml_cutoff} exceeds the state cutoff {}",
            w.len() - 1
        )));
    }
    let tail = w[dim..].iter().sum::<f64>() + state.truncation_deficit;
    if tail > ML_TAIL_TOL {
        return Err(Error::TailMass { tail, tolerance: ML_TAIL_TOL });
    }
    let labels = outcome_labels(&data.counts_by_n);
    let index = label_index(&labels);
    let dens = SmearedFockDensities::new(ml_cutoff, eta_h);
    let weights = &w[..dim];
    let blocks: Vec<Vec<(usize, Vec<f64>)>> = data
        .records
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut buf = vec![0.0; dim];
            chunk
                .iter()
                .map(|r| {
                    let Reading::Quadrature(x) = r.result else {
                        return Err(Error::Validation("homodyne dataset holds a discrete record".into()));
                    };
                    dens.eval_into(x, &mut buf);
                    Ok((index[r.outcome], buf.iter().zip(weights).map(|(q, w)| q * w).collect()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![Vec::new(); labels.len()];
    for (i, row) in blocks.into_iter().flatten() {
        rows[i].extend(row);
    }
    Ok(MlProblem { dim, labels, n_records: data.len() as u64, data: ProblemData::Diagonal(DiagonalData { rows }) })
}

/// Finite problem: counts per `(outcome, projector)` against the
/// (optionally noisy) tomographer effects.
pub fn build_problem_finite(
    data: &Dataset,
    state: &BipartiteState,
    quorum: &FiniteQuorum,
    noise: Option<&NoiseMap>,
) -> Result<MlProblem> {
    if data.kind != DatasetKind::Finite {
        return Err(Error::UnsupportedStructure("finite ML needs a finite-quorum dataset".into()));
    }
    let labels = outcome_labels(&data.counts_by_n);
    let index = label_index(&labels);
    let effects = tomographer_effects(state, quorum, noise)?;
    let mut counts = vec![vec![0.0; effects.len()]; labels.len()];
    for r in &data.records {
        let (Setting::Index(k), Reading::Index(m)) = (r.setting, r.result) else {
            return Err(Error::Validation("finite dataset holds a continuous record".into()));
        };
        if k >= quorum.n_settings() || m >= quorum.settings[k].len() {
            return Err(Error::Validation(format!("record (k={k}, m={m}) outside the quorum")));
        }
        counts[index[r.outcome]][quorum.projector_index(k, m)] += 1.0;
    }
    Ok(MlProblem {
        dim: state.dim_system,
        labels,
        n_records: data.len() as u64,
        data: ProblemData::Finite(FiniteData { effects, counts }),
    })
}

impl MlProblem {
    /// `P_n = 1/(number of elements)` for every element.
    pub fn uniform_init(&self) -> Povm {
        let k = self.labels.len() as f64;
        let e = ComplexOperator::identity(self.dim).scale_real(1.0 / k);
        Povm { dim: self.dim, elements: vec![e; self.labels.len()] }
    }

    fn check_povm(&self, povm: &Povm) -> Result<()> {
        if povm.dim != self.dim || povm.len() != self.labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "POVM has {} elements of dim {}, problem expects {} of dim {}",
                povm.len(),
                povm.dim,
                self.labels.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn merge(mut self, o: Sum) -> Sum {
        self.add(o.s);
        self.add(o.c);
        self
    }

    fn value(self) -> f64 {
        self.s + self.c
    }
}

fn floored_ln(p: f64) -> f64 {
    if p > PROBABILITY_FLOOR {
        p.ln()
    } else {
        PROBABILITY_FLOOR.ln()
    }
}

/// `Σ_i log p_i` with probabilities floored at [`PROBABILITY_FLOOR`].
pub fn log_likelihood(povm: &Povm, problem: &MlProblem) -> Result<f64> {
    problem.check_povm(povm)?;
    Ok(match &problem.data {
        ProblemData::Diagonal(d) => diagonal_pass(d, problem.dim, &povm.diagonals()).1,
        ProblemData::Finite(f) => finite_pass(f, &povm.elements).1,
    })
}

/// One pass over the rows: `A_n[m] = Σ_i r_i[m]/p_i` and the log-likelihood.
fn diagonal_pass(d: &DiagonalData, dim: usize, p: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let mut total = Sum::default();
    let mut grads = Vec::with_capacity(p.len());
    for (rows, pn) in d.rows.iter().zip(p) {
        let (g, ll) = rows
            .par_chunks(ROW_CHUNK * dim)
            .map(|chunk| {
                let mut g = vec![0.0; dim];
                let mut ll = Sum::default();
                for r in chunk.chunks_exact(dim) {
                    let prob = dot(r, pn);
                    ll.add(floored_ln(prob));
                    if prob > PROBABILITY_FLOOR {
                        let inv = 1.0 / prob;
                        g.iter_mut().zip(r).for_each(|(gm, rm)| *gm += rm * inv);
                    }
                }
                (g, ll)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold((vec![0.0; dim], Sum::default()), |(mut ga, la), (g, l)| {
                ga.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                (ga, la.merge(l))
            });
        total = total.merge(ll);
        grads.push(g);
    }
    (grads, total.value())
}

/// Four-lane dot product; the fixed lane order keeps results reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Entries this small carry no likelihood; zeroing them avoids subnormal
/// arithmetic, which is orders of magnitude slower.
const FLUSH_BELOW: f64 = 1e-200;

fn flush_tiny(v: f64) -> f64 {
    if v < FLUSH_BELOW {
        0.0
    } else {
        v
    }
}

/// EM map on diagonals: `P_n[m] ← P_n[m] A_n[m] / Σ_n' P_n'[m] A_n'[m]`.
fn em_update(p: &[Vec<f64>], grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = p[0].len();
    let mut next: Vec<Vec<f64>> = p.iter().zip(grads).map(|(pn, an)| pn.iter().zip(an).map(|(a, b)| a * b).collect()).collect();
    for m in 0..dim {
        let lambda: f64 = next.iter().map(|v| v[m]).sum();
        if lambda > 0.0 {
            next.iter_mut().for_each(|v| v[m] = flush_tiny(v[m] / lambda));
        } else {
            // level carries no weight in the data; keep it where it was
            next.iter_mut().zip(p).for_each(|(v, pn)| v[m] = pn[m]);
        }
    }
    next
}

fn finite_pass(f: &FiniteData, povm: &[ComplexOperator]) -> (Vec<ComplexOperator>, f64) {
    let d = povm[0].dim();
    let total: f64 = f.counts.iter().flatten().sum::<f64>();
    let total = if total > 0.0 { total } else { 1.0 };
    let mut ll = Sum::default();
    let mut grads = Vec::with_capacity(povm.len());
    for (pn, counts) in povm.iter().zip(&f.counts) {
        let mut g = ComplexOperator::zeros(d);
        for (e, &c) in f.effects.iter().zip(counts) {
            if c == 0.0 {
                continue;
            }
            let prob = pn.trace_product(e).re;
            ll.add(c * floored_ln(prob));
            if prob > PROBABILITY_FLOOR {
                g = &g + &e.scale_real(c / (prob * total));
            }
        }
        grads.push(g);
    }
    (grads, ll.value())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Gain per iteration fell below the threshold.
    Converged,
    MaxIterations,
    /// No ascent step could be found.
    Stalled,
}

#[derive(Clone, Debug, Serialize)]
pub struct MlResult {
    pub povm_hat: Povm,
    pub labels: Vec<Option<usize>>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Log-likelihood of each accepted iterate, starting at the initial point.
    pub trace: Vec<f64>,
    /// Iterations that needed the projected-gradient fallback.
    pub fallback_steps: usize,
    pub report: PovmReport,
}

impl MlResult {
    pub fn element(&self, outcome: usize) -> Option<&ComplexOperator> {
        self.labels.iter().position(|l| *l == Some(outcome)).map(|i| &self.povm_hat.elements[i])
    }

    /// `⟨m|P̂_n|m⟩`, zero for outcomes absent from the data.
    pub fn diagonal_entry(&self, outcome: usize, m: usize) -> f64 {
        self.element(outcome).map_or(0.0, |e| e.get(m, m).re)
    }

    pub fn is_monotone(&self, slack: f64) -> bool {
        self.trace.windows(2).all(|w| w[1] >= w[0] - slack)
    }

    pub fn satisfies_constraints(&self) -> bool {
        self.report.completeness_deviation <= ML_COMPLETENESS_TOL && self.report.min_eigenvalue >= -ML_POSITIVITY_TOL
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Iterative likelihood ascent from `init`, which must satisfy the POVM
/// constraints.
pub fn maximize(problem: &MlProblem, init: &Povm, stop: StopRule) -> Result<MlResult> {
    problem.check_povm(init)?;
    let r = init.report();
    if r.completeness_deviation > ML_COMPLETENESS_TOL || r.min_eigenvalue < -ML_POSITIVITY_TOL {
        return Err(Error::Validation(format!(
            "initial POVM violates constraints: completeness {:e}, min eigenvalue {:e}",
            r.completeness_deviation, r.min_eigenvalue
        )));
    }
    let outcome = match &problem.data {
        ProblemData::Diagonal(d) => {
            if !init.is_diagonal() {
                return Err(Error::Validation("diagonal problem needs a diagonal initial POVM".into()));
            }
            maximize_diagonal(d, problem.dim, init.diagonals(), stop)
        }
        ProblemData::Finite(f) => maximize_finite(f, init.elements.clone(), stop),
    };
    let povm_hat = Povm::new_unchecked(outcome.elements)?;
    let report = povm_hat.report();
    Ok(MlResult {
        povm_hat,
        labels: problem.labels.clone(),
        log_likelihood: *outcome.trace.last().expect("trace starts with the initial point"),
        iterations: outcome.trace.len() - 1,
        converged: outcome.reason == StopReason::Converged,
        stop_reason: outcome.reason,
        trace: outcome.trace,
        fallback_steps: outcome.fallback_steps,
        report,
    })
}

struct Outcome {
    elements: Vec<ComplexOperator>,
    trace: Vec<f64>,
    reason: StopReason,
    fallback_steps: usize,
}

/// EM with squared extrapolation: two EM steps define a direction, the
/// extrapolated point is stabilized by one more EM step and kept only if it
/// beats the plain second EM iterate.
fn maximize_diagonal(d: &DiagonalData, dim: usize, init: Vec<Vec<f64>>, stop: StopRule) -> Outcome {
    let mut p = init;
    let (mut grads, mut ll) = diagonal_pass(d, dim, &p);
    let mut trace = vec![ll];
    let mut reason = StopReason::MaxIterations;
    for _ in 0..stop.max_iters {
        // one squared-extrapolation cycle: EM twice, extrapolate, stabilize
        // with one more EM step; the plain EM iterate is the fallback
        let p1 = em_update(&p, &grads);
        let (g1, ll1) = diagonal_pass(d, dim, &p1);
        let (mut next, mut next_g, mut next_ll) = (p1, g1, ll1);
        let p2 = em_update(&next, &next_g);
        if let Some(px) = extrapolate(&p, &next, &p2) {
            let (gx, _) = diagonal_pass(d, dim, &px);
            let pxx = em_update(&px, &gx);
            let (gxx, llxx) = diagonal_pass(d, dim, &pxx);
            if llxx >= next_ll {
                (next, next_g, next_ll) = (pxx, gxx, llxx);
            }
        }
        let gain = next_ll - ll;
        if gain < 0.0 {
            // only rounding can get here; keep the better point
            reason = StopReason::Converged;
            break;
        }
        (p, grads, ll) = (next, next_g, next_ll);
        trace.push(ll);
        if gain < stop.min_ll_increase {
            reason = StopReason::Converged;
            break;
        }
    }
    let elements = p.iter().map(|v| ComplexOperator::from_real_diagonal(v)).collect();
    Outcome { elements, trace, reason, fallback_steps: 0 }
}

/// Squared extrapolation `θ' = θ₀ − 2α r + α² v` with `α = −|r|/|v|`.
/// Entries pushed below zero are floored at a small fraction of the latest
/// EM iterate, which keeps them positive without shortening the step.
fn extrapolate(p0: &[Vec<f64>], p1: &[Vec<f64>], p2: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    const FLOOR: f64 = 1e-2;
    let (mut rr, mut vv) = (0.0, 0.0);
    for ((a, b), c) in p0.iter().flatten().zip(p1.iter().flatten()).zip(p2.iter().flatten()) {
        let r = b - a;
        let v = c - 2.0 * b + a;
        rr += r * r;
        vv += v * v;
    }
    if vv == 0.0 || rr == 0.0 {
        return None;
    }
    let alpha = -(rr / vv).sqrt();
    if alpha > -1.0 {
        return None;
    }
    let cand = p0
        .iter()
        .zip(p1)
        .zip(p2)
        .map(|((a, b), c)| {
            a.iter()
                .zip(b)
                .zip(c)
                .map(|((a, b), c)| {
                    let x = a - 2.0 * alpha * (b - a) + alpha * alpha * (c - 2.0 * b + a);
                    x.max(FLOOR * c)
                })
                .collect()
        })
        .collect();
    Some(renormalize_columns(cand))
}

fn renormalize_columns(mut p: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let dim = p[0].len();
    for m in 0..dim {
        let s: f64 = p.iter().map(|v| v[m]).sum();
        if s > 0.0 {
            p.iter_mut().for_each(|v| v[m] = flush_tiny(v[m] / s));
        }
    }
    p
}

/// `P_n ← λ^{-1/2} D_n P_n D_n λ^{-1/2}` with `D_n = 1 + εR_n` and
/// `λ = Σ_n D_n P_n D_n`.
fn rrr_step(p: &[ComplexOperator], grads: &[ComplexOperator], eps: f64) -> Option<Vec<ComplexOperator>> {
    let d = p[0].dim();
    let id = ComplexOperator::identity(d);
    let g: Vec<ComplexOperator> = p
        .iter()
        .zip(grads)
        .map(|(pn, rn)| {
            let dn = &id + &rn.scale_real(eps);
            (&(&dn * pn) * &dn).hermitian_part()
        })
        .collect();
    normalize_sum(g)
}

fn normalize_sum(g: Vec<ComplexOperator>) -> Option<Vec<ComplexOperator>> {
    let d = g[0].dim();
    let lambda = g.iter().fold(ComplexOperator::zeros(d), |acc, x| &acc + x);
    let ev = crate::qmath::hermitian_eigenvalues(&lambda);
    if ev.iter().any(|v| !(*v > 1e-14)) {
        return None;
    }
    let s = hermitian_function(&lambda, |v| v.powf(-0.5));
    Some(g.iter().map(|x| (&(&s * x) * &s).hermitian_part()).collect())
}

/// Gradient step on the completeness-preserving subspace, then eigenvalue
/// clipping and re-normalization.
fn projected_gradient_step(p: &[ComplexOperator], grads: &[ComplexOperator], t: f64) -> Option<Vec<ComplexOperator>> {
    let d = p[0].dim();
    let k = p.len() as f64;
    let mean = grads.iter().fold(ComplexOperator::zeros(d), |acc, x| &acc + x).scale_real(1.0 / k);
    let moved = p
        .iter()
        .zip(grads)
        .map(|(pn, gn)| {
            let step = &(&(gn - &mean)).scale_real(t) + pn;
            hermitian_function(&step.hermitian_part(), |v| v.max(0.0))
        })
        .collect();
    normalize_sum(moved)
}

fn maximize_finite(f: &FiniteData, init: Vec<ComplexOperator>, stop: StopRule) -> Outcome {
    let mut p = init;
    let (mut grads, mut ll) = finite_pass(f, &p);
    let mut trace = vec![ll];
    let mut eps = 1.0;
    let mut reason = StopReason::MaxIterations;
    let mut fallback_steps = 0;
    'outer: for _ in 0..stop.max_iters {
        let mut accepted = None;
        while eps >= 1e-10 {
            if let Some(cand) = rrr_step(&p, &grads, eps) {
                let (g, l) = finite_pass(f, &cand);
                if l >= ll {
                    accepted = Some((cand, g, l, eps));
                    eps = (eps * 2.0).min(1e4);
                    break;
                }
            }
            eps /= 4.0;
        }
        if accepted.is_none() {
            let mut t = 1.0;
            while t >= 1e-12 {
                if let Some(cand) = projected_gradient_step(&p, &grads, t) {
                    let (g, l) = finite_pass(f, &cand);
                    if l > ll {
                        accepted = Some((cand, g, l, 1.0));
                        fallback_steps += 1;
                        eps = 1.0;
                        break;
                    }
                }
                t /= 4.0;
            }
        }
        let Some((cand, g, l, used_eps)) = accepted else {
            reason = StopReason::Stalled;
            break 'outer;
        };
        let gain = l - ll;
        (p, grads, ll) = (cand, g, l);
        trace.push(ll);
        // a tiny gain from a heavily diluted step says nothing about convergence
        if gain < stop.min_ll_increase && used_eps >= 1.0 {
            reason = StopReason::Converged;
            break;
        }
    }
    Outcome { elements: p, trace, reason, fallback_steps }
}
