//! Seeded generation of joint measurement records `(n, k, m-or-x)`.
//!
//! Records are produced in fixed-size chunks; chunk `s` draws from the
//! ChaCha8 stream `s` of the master seed, so output is identical for any
//! number of worker threads. Records keep the canonical (chunk, draw) order.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::Povm;
use crate::error::{Error, Result};
use crate::qmath::{binomial_pmf, fock_quadrature_amplitudes, ComplexOperator};
use crate::quorum::{FiniteQuorum, NoiseMap};
use crate::states::BipartiteState;

/// Records per random stream.
pub const STREAM_CHUNK: usize = 1 << 14;

const NEGATIVE_PROBABILITY_TOL: f64 = 1e-10;

/// Which quorum setting the tomographer used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Setting {
    Index(usize),
    /// Homodyne phase in `[0, π)`.
    Phase(f64),
}

/// What the tomographer read out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Reading {
    Index(usize),
    Quadrature(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub outcome: usize,
    pub setting: Setting,
    pub result: Reading,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Finite,
    Homodyne,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub records: Vec<JointRecord>,
    pub seed: u64,
    pub scenario_id: String,
    /// `counts_by_n[n]` = number of records with detector outcome `n`.
    pub counts_by_n: Vec<u64>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, records: Vec<JointRecord>, seed: u64, scenario_id: impl Into<String>) -> Self {
        let counts_by_n = histogram(&records);
        Self { kind, records, seed, scenario_id: scenario_id.into(), counts_by_n }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same metadata, different records (used by resampling).
    pub fn with_records(&self, records: Vec<JointRecord>) -> Self {
        Self::new(self.kind, records, self.seed, self.scenario_id.clone())
    }
}

fn histogram(records: &[JointRecord]) -> Vec<u64> {
    let len = records.iter().map(|r| r.outcome + 1).max().unwrap_or(0);
    let mut h = vec![0u64; len];
    for r in records {
        h[r.outcome] += 1;
    }
    h
}

/// Generates `n_records` records by calling `draw` on per-chunk streams.
fn generate<F>(n_records: usize, seed: u64, draw: F) -> Vec<JointRecord>
where
    F: Fn(&mut ChaCha8Rng) -> JointRecord + Sync,
{
    let n_chunks = n_records.div_ceil(STREAM_CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let len = STREAM_CHUNK.min(n_records - s * STREAM_CHUNK);
            (0..len).map(|_| draw(&mut rng)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Independent generator `stream` of a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn pick(cumulative: &[f64], u: f64) -> usize {
    let total = *cumulative.last().unwrap_or(&0.0);
    let target = u * total;
    cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1)
}

fn cumulate(p: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    p.into_iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Effects `Tr₂[(1 ⊗ N(B_{km})) R]` in flat projector order.
pub fn tomographer_effects(
    state: &BipartiteState,
    quorum: &FiniteQuorum,
    noise: Option<&NoiseMap>,
) -> Result<Vec<ComplexOperator>> {
    quorum
        .projectors()
        .iter()
        .map(|b| {
            let b = noise.map_or_else(|| b.clone(), |n| n.apply(b));
            state.tomographer_effect(&b)
        })
        .collect()
}

/// Exact `p(n, m | k) = Tr[(P_n ⊗ N(B_{km})) R]` as `[k][n][m]`.
pub fn exact_conditional_table(
    state: &BipartiteState,
    povm: &Povm,
    quorum: &FiniteQuorum,
    noise: Option<&NoiseMap>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if povm.dim != state.dim_system || quorum.dim != state.dim_tomo {
        return Err(Error::DimensionMismatch(format!(
            "state is {}x{}, POVM dim {}, quorum dim {}",
            state.dim_system, state.dim_tomo, povm.dim, quorum.dim
        )));
    }
    let effects = tomographer_effects(state, quorum, noise)?;
    let mut table = Vec::with_capacity(quorum.n_settings());
    for (k, basis) in quorum.settings.iter().enumerate() {
        let mut per_n = Vec::with_capacity(povm.len());
        for (n, p_n) in povm.elements.iter().enumerate() {
            let mut row = Vec::with_capacity(basis.len());
            for m in 0..basis.len() {
                let p = p_n.trace_product(&effects[quorum.projector_index(k, m)]).re;
                if p < -NEGATIVE_PROBABILITY_TOL || !p.is_finite() {
                    return Err(Error::NumericalValidity { value: p, location: format!("p(n={n}, m={m} | k={k})") });
                }
                row.push(p.max(0.0));
            }
            per_n.push(row);
        }
        table.push(per_n);
    }
    Ok(table)
}

/// Joint records from `p(n,m|k)` with the setting `k` drawn uniformly.
pub fn sample_finite(
    state: &BipartiteState,
    povm: &Povm,
    quorum: &FiniteQuorum,
    noise: Option<&NoiseMap>,
    n_records: usize,
    seed: u64,
    scenario_id: &str,
) -> Result<Dataset> {
    let table = exact_conditional_table(state, povm, quorum, noise)?;
    // per setting: flattened (n, m) cumulative distribution
    let layouts: Vec<(usize, Vec<f64>)> = table
        .iter()
        .map(|per_n| {
            let width = per_n[0].len();
            (width, cumulate(per_n.iter().flatten().copied()))
        })
        .collect();
    let n_settings = layouts.len();
    let records = generate(n_records, seed, |rng| {
        let k = rng.random_range(0..n_settings);
        let (width, cum) = &layouts[k];
        let idx = pick(cum, rng.random::<f64>());
        JointRecord { outcome: idx / width, setting: Setting::Index(k), result: Reading::Index(idx % width) }
    });
    Ok(Dataset::new(DatasetKind::Finite, records, seed, scenario_id))
}

/// Inverse-CDF tables for the quadrature densities `ψ_k(y)²`.
#[derive(Clone, Debug)]
pub struct QuadratureSampler {
    y_min: f64,
    step: f64,
    cdfs: Vec<Vec<f64>>,
}

impl QuadratureSampler {
    pub fn new(max_k: usize) -> Self {
        let half_width = 0.5 * ((2 * max_k + 1) as f64).sqrt() + 6.0;
        let step = 1.0 / 2048.0;
        let n = (2.0 * half_width / step).round() as usize + 1;
        let y_min = -half_width;
        let mut dens = vec![vec![0.0; n]; max_k + 1];
        for i in 0..n {
            let psi = fock_quadrature_amplitudes(max_k, y_min + i as f64 * step);
            for (k, p) in psi.iter().enumerate() {
                dens[k][i] = p * p;
            }
        }
        let cdfs = dens
            .into_iter()
            .map(|d| {
                let mut c = Vec::with_capacity(n);
                let mut acc = 0.0;
                c.push(0.0);
                for w in d.windows(2) {
                    acc += 0.5 * (w[0] + w[1]) * step;
                    c.push(acc);
                }
                c.iter_mut().for_each(|v| *v /= acc);
                c
            })
            .collect();
        Self { y_min, step, cdfs }
    }

    pub fn max_k(&self) -> usize {
        self.cdfs.len() - 1
    }

    /// Draws `y ~ ψ_k(y)²`.
    pub fn draw(&self, k: usize, u: f64) -> f64 {
        let c = &self.cdfs[k];
        let i = c.partition_point(|&v| v <= u).clamp(1, c.len() - 1) - 1;
        let span = c[i + 1] - c[i];
        let f = if span > 0.0 { (u - c[i]) / span } else { 0.5 };
        self.y_min + (i as f64 + f) * self.step
    }
}

/// Records for a Schmidt-form (twin-beam-like) state and a Fock-diagonal
/// detector, read out by homodyne detection of efficiency `eta_h`.
///
/// Per record: pair number `m ~ |c_m|²`, detector outcome `n ~ ⟨m|P_n|m⟩`,
/// phase uniform in `[0, π)`, and `x ~ q_m`. The last draw uses the loss
/// decomposition of `q_m`: `j ~ Binomial(m, η_h)`, `y ~ ψ_j²`, `x = y/√η_h`.
pub fn sample_homodyne_twinbeam(
    state: &BipartiteState,
    povm: &Povm,
    eta_h: f64,
    n_records: usize,
    seed: u64,
    scenario_id: &str,
) -> Result<Dataset> {
    let weights = state
        .schmidt_weights()
        .ok_or_else(|| Error::UnsupportedStructure("homodyne sampler needs a Schmidt-form state".into()))?;
    if !povm.is_diagonal() {
        return Err(Error::UnsupportedStructure("homodyne sampler needs a Fock-diagonal POVM".into()));
    }
    if povm.dim != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "POVM dim {} does not match state cutoff dim {}",
            povm.dim,
            weights.len()
        )));
    }
    if !(eta_h > 0.0 && eta_h <= 1.0) {
        return Err(Error::Validation(format!("eta_h = {eta_h} must lie in (0, 1]")));
    }
    let max_m = weights.len() - 1;
    let diag = povm.diagonals();
    for (n, row) in diag.iter().enumerate() {
        if let Some((m, v)) = row.iter().enumerate().find(|(_, v)| **v < -NEGATIVE_PROBABILITY_TOL) {
            return Err(Error::NumericalValidity { value: *v, location: format!("<{m}|P_{n}|{m}>") });
        }
    }
    let pair_cdf = cumulate(weights.iter().copied());
    let outcome_cdfs: Vec<Vec<f64>> = (0..=max_m).map(|m| cumulate(diag.iter().map(|row| row[m].max(0.0)))).collect();
    let loss_cdfs: Vec<Vec<f64>> =
        (0..=max_m).map(|m| cumulate((0..=m).map(|j| binomial_pmf(m, j, eta_h)))).collect();
    let quad = QuadratureSampler::new(max_m);
    let scale = 1.0 / eta_h.sqrt();
    let records = generate(n_records, seed, |rng| {
        let m = pick(&pair_cdf, rng.random());
        let n = pick(&outcome_cdfs[m], rng.random());
        let phase = PI * rng.random::<f64>();
        let j = pick(&loss_cdfs[m], rng.random());
        let x = quad.draw(j, rng.random()) * scale;
        JointRecord { outcome: n, setting: Setting::Phase(phase), result: Reading::Quadrature(x) }
    });
    Ok(Dataset::new(DatasetKind::Homodyne, records, seed, scenario_id))
}

/// Joint frequencies over (detector outcome, quorum projector) for finite
/// quorums. Built either from sampled counts or from exact probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    pub n_outcomes: usize,
    /// Settings per flat projector index.
    pub projector_setting: Vec<usize>,
    pub n_settings: usize,
    /// `freq[n][j]`, summing to 1 over all `(n, j)`.
    pub freq: Vec<Vec<f64>>,
    /// Number of records behind the frequencies; `None` for exact input.
    pub sample_size: Option<u64>,
}

impl FrequencyTable {
    pub fn from_dataset(data: &Dataset, quorum: &FiniteQuorum, n_outcomes: usize) -> Result<Self> {
        if data.kind != DatasetKind::Finite {
            return Err(Error::UnsupportedStructure("frequency table needs a finite-quorum dataset".into()));
        }
        let mut freq = vec![vec![0.0; quorum.n_projectors()]; n_outcomes];
        for r in &data.records {
            let (Setting::Index(k), Reading::Index(m)) = (r.setting, r.result) else {
                return Err(Error::Validation("finite dataset holds a continuous record".into()));
            };
            if r.outcome >= n_outcomes || k >= quorum.n_settings() || m >= quorum.settings[k].len() {
                return Err(Error::Validation(format!(
                    "record (n={}, k={k}, m={m}) is outside the configured outcome set or quorum",
                    r.outcome
                )));
            }
            freq[r.outcome][quorum.projector_index(k, m)] += 1.0;
        }
        let total = data.len().max(1) as f64;
        freq.iter_mut().flatten().for_each(|v| *v /= total);
        Ok(Self {
            n_outcomes,
            projector_setting: projector_settings(quorum),
            n_settings: quorum.n_settings(),
            freq,
            sample_size: Some(data.len() as u64),
        })
    }

    /// Exact joint probabilities `p(n, m | k) / K` for uniform settings.
    pub fn exact(
        state: &BipartiteState,
        povm: &Povm,
        quorum: &FiniteQuorum,
        noise: Option<&NoiseMap>,
    ) -> Result<Self> {
        let table = exact_conditional_table(state, povm, quorum, noise)?;
        let kf = quorum.n_settings() as f64;
        let mut freq = vec![vec![0.0; quorum.n_projectors()]; povm.len()];
        for (k, per_n) in table.iter().enumerate() {
            for (n, row) in per_n.iter().enumerate() {
                for (m, p) in row.iter().enumerate() {
                    freq[n][quorum.projector_index(k, m)] = p / kf;
                }
            }
        }
        Ok(Self {
            n_outcomes: povm.len(),
            projector_setting: projector_settings(quorum),
            n_settings: quorum.n_settings(),
            freq,
            sample_size: None,
        })
    }

    /// `p̂(n)`.
    pub fn outcome_marginal(&self) -> Vec<f64> {
        self.freq.iter().map(|row| row.iter().sum()).collect()
    }
}

fn projector_settings(q: &FiniteQuorum) -> Vec<usize> {
    q.settings.iter().enumerate().flat_map(|(k, b)| std::iter::repeat_n(k, b.len())).collect()
}

// ---------------------------------------------------------------------------
// File formats

/// JSON sidecar stored next to the `n,k,result` CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub kind: DatasetKind,
    pub seed: u64,
    pub scenario_id: String,
    pub n_records: u64,
    pub counts_by_n: Vec<u64>,
    #[serde(default)]
    pub parameters: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    pub fn sidecar(&self, parameters: BTreeMap<String, serde_json::Value>) -> DatasetSidecar {
        DatasetSidecar {
            kind: self.kind,
            seed: self.seed,
            scenario_id: self.scenario_id.clone(),
            n_records: self.len() as u64,
            counts_by_n: self.counts_by_n.clone(),
            parameters,
        }
    }

    /// CSV with header `n,k,result`. Floats use the shortest round-trip
    /// representation, so the bytes are stable for a fixed dataset.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n,k,result")?;
        for r in &self.records {
            let k = match r.setting {
                Setting::Index(k) => k.to_string(),
                Setting::Phase(p) => format!("{p:?}"),
            };
            let res = match r.result {
                Reading::Index(m) => m.to_string(),
                Reading::Quadrature(x) => format!("{x:?}"),
            };
            writeln!(w, "{},{k},{res}", r.outcome)?;
        }
        Ok(())
    }

    /// Rebuilds a dataset from its CSV and sidecar, checking consistency.
    pub fn from_parts<R: Read>(csv_reader: R, sidecar: &DatasetSidecar) -> Result<Self> {
        let records = parse_dataset_csv(csv_reader, sidecar.kind)?;
        let data = Self::new(sidecar.kind, records, sidecar.seed, sidecar.scenario_id.clone());
        if data.len() as u64 != sidecar.n_records {
            return Err(Error::Parse(format!(
                "sidecar declares {} records, CSV holds {}",
                sidecar.n_records,
                data.len()
            )));
        }
        let mut declared = sidecar.counts_by_n.clone();
        while declared.last() == Some(&0) {
            declared.pop();
        }
        if declared != data.counts_by_n {
            return Err(Error::Parse("sidecar counts_by_n disagree with the CSV records".into()));
        }
        Ok(data)
    }
}

pub fn parse_sidecar(text: &str) -> Result<DatasetSidecar> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

/// Parses `n,k,result` rows; the sidecar kind decides how `k` and `result`
/// are read.
pub fn parse_dataset_csv<R: Read>(reader: R, kind: DatasetKind) -> Result<Vec<JointRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if headers.len() != 3 || &headers[0] != "n" || &headers[1] != "k" || &headers[2] != "result" {
        return Err(Error::Parse("expected header `n,k,result`".into()));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::Parse(format!("row {}: expected 3 fields", line + 1)));
        }
        let bad = |what: &str| Error::Parse(format!("row {}: invalid {what}", line + 1));
        let outcome: usize = rec[0].trim().parse().map_err(|_| bad("n"))?;
        let (setting, result) = match kind {
            DatasetKind::Finite => (
                Setting::Index(rec[1].trim().parse().map_err(|_| bad("k"))?),
                Reading::Index(rec[2].trim().parse().map_err(|_| bad("result"))?),
            ),
            DatasetKind::Homodyne => {
                let phase: f64 = rec[1].trim().parse().map_err(|_| bad("phase"))?;
                let x: f64 = rec[2].trim().parse().map_err(|_| bad("quadrature"))?;
                if !phase.is_finite() || !x.is_finite() {
                    return Err(bad("non-finite value"));
                }
                (Setting::Phase(phase), Reading::Quadrature(x))
            }
        };
        out.push(JointRecord { outcome, setting, result });
    }
    Ok(out)
}
