//! Configuration-driven calibration runs: check that the probe state is
//! faithful, simulate the joint records, reconstruct, and compare with the
//! known detector.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detectors::{
    computational_basis, noisy_photocounter, projective_povm, random_povm, thermal_tail, Povm, PovmReport,
    THERMAL_TAIL_TOL,
};
use crate::error::{Error, Result};
use crate::qmath::ComplexOperator;
use crate::quorum::{
    compute_dual_set, pauli_quorum, random_quorum, FiniteQuorum, HomodyneQuorum, KernelGrid, NoiseMap,
    DEFAULT_MAX_NOISE_CONDITION, KERNEL_RESIDUAL_TOL,
};
use crate::recon_avg::{
    estimate_conditioned_finite, estimate_conditioned_from_table, estimate_conditioned_homodyne,
    exact_conditioned_homodyne, recover_povm, RecoveredPovm,
};
use crate::recon_ml::{
    build_problem_diagonal, build_problem_finite, maximize, FiniteData, MlProblem, MlResult, ProblemData, StopRule,
};
use crate::sampler::{sample_finite, sample_homodyne_twinbeam, Dataset, FrequencyTable};
use crate::states::{
    build_diagonal_map_r, build_map_r, ground_state, maximally_entangled, maximally_mixed, twin_beam,
    BipartiteState, MapROperator, MapSubspace,
};
use crate::stats::{bootstrap, BootstrapReport};

/// Probe state shared by the detector (first factor) and the tomographer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    /// `∝ Σ_m ξ^m |m⟩|m⟩`, truncated at `fock_cutoff`.
    TwinBeam { xi: f64, fock_cutoff: usize },
    MaximallyEntangled { dim: usize },
    /// `|0⟩⟨0| ⊗ 1/d`; never faithful.
    Product { dim: usize },
}

impl StateSpec {
    pub fn build(&self) -> Result<BipartiteState> {
        match *self {
            StateSpec::TwinBeam { xi, fock_cutoff } => twin_beam(xi, fock_cutoff),
            StateSpec::MaximallyEntangled { dim } => maximally_entangled(dim),
            StateSpec::Product { dim } => BipartiteState::product(&ground_state(dim), &maximally_mixed(dim)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorSpec {
    /// Photon counter with efficiency `eta_p` and thermal dark counts `nu`.
    /// `env_cutoff` defaults to the smallest one with thermal tail < 1e-8.
    Photocounter {
        eta_p: f64,
        nu: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        env_cutoff: Option<usize>,
    },
    /// Random POVM from the Ginibre ensemble.
    Random { outcomes: usize, seed: u64 },
    /// Projective measurement in the computational basis.
    Computational,
    /// The single-outcome POVM `{1}`.
    Trivial,
}

impl DetectorSpec {
    pub fn build(&self, dim: usize) -> Result<Povm> {
        match *self {
            DetectorSpec::Photocounter { eta_p, nu, env_cutoff } => {
                let env = env_cutoff.unwrap_or_else(|| auto_env_cutoff(nu));
                noisy_photocounter(eta_p, nu, dim - 1, env)
            }
            DetectorSpec::Random { outcomes, seed } => random_povm(dim, outcomes, seed),
            DetectorSpec::Computational => projective_povm(&computational_basis(dim)),
            DetectorSpec::Trivial => Povm::new(vec![ComplexOperator::identity(dim)]),
        }
    }
}

/// Smallest environment cutoff whose thermal tail is below 1e-8.
pub fn auto_env_cutoff(nu: f64) -> usize {
    (0..10_000).find(|&c| thermal_tail(nu, c) < THERMAL_TAIL_TOL).unwrap_or(10_000)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TomographerSpec {
    /// Homodyne detection of efficiency `eta_h`; the reconstruction is
    /// restricted to photon-number diagonals.
    Homodyne {
        eta_h: f64,
        #[serde(default)]
        grid: KernelGrid,
        #[serde(default)]
        ridge: f64,
    },
    /// The three Pauli eigenbases (qubits only).
    Pauli {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depolarizing: Option<f64>,
    },
    /// Haar-random orthonormal bases.
    RandomBases {
        settings: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depolarizing: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Averaging,
    Ml,
    Both,
}

impl Strategy {
    fn averaging(self) -> bool {
        matches!(self, Strategy::Averaging | Strategy::Both)
    }

    fn ml(self) -> bool {
        matches!(self, Strategy::Ml | Strategy::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlSettings {
    /// Fock cutoff of the diagonal likelihood model; ignored for finite
    /// quorums.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fock_cutoff: Option<usize>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_min_ll_increase")]
    pub min_ll_increase: f64,
}

fn default_max_iters() -> usize {
    StopRule::default().max_iters
}

fn default_min_ll_increase() -> f64 {
    StopRule::default().min_ll_increase
}

impl Default for MlSettings {
    fn default() -> Self {
        Self { fock_cutoff: None, max_iters: default_max_iters(), min_ll_increase: default_min_ll_increase() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative singular-value cutoff for inverting the state map.
    #[serde(default = "default_svd")]
    pub svd: f64,
    /// Largest entry error accepted in finite exact-probability runs.
    #[serde(default = "default_exact")]
    pub exact: f64,
    /// Residual bound on the kernel unbiasedness system.
    #[serde(default = "default_kernel")]
    pub kernel_residual: f64,
}

fn default_svd() -> f64 {
    crate::states::DEFAULT_SVD_TOLERANCE
}

fn default_exact() -> f64 {
    1e-8
}

fn default_kernel() -> f64 {
    KERNEL_RESIDUAL_TOL
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { svd: default_svd(), exact: default_exact(), kernel_residual: default_kernel() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Number of joint records; ignored when `exact_probabilities` is set.
    pub n_records: usize,
    /// Feed exact distributions to the estimators instead of samples.
    #[serde(default)]
    pub exact_probabilities: bool,
    pub strategy: Strategy,
    /// Bootstrap repetitions; 0 disables resampling.
    #[serde(default)]
    pub bootstrap_reps: usize,
    /// Largest outcome and level reported for diagonal reconstructions.
    #[serde(default = "default_display_max")]
    pub display_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Also write the sampled records as CSV plus JSON sidecar.
    #[serde(default)]
    pub write_dataset: bool,
    pub state: StateSpec,
    pub detector: DetectorSpec,
    pub tomographer: TomographerSpec,
    #[serde(default)]
    pub ml: MlSettings,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_display_max() -> usize {
    7
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.name.trim().is_empty() {
            return fail("scenario name is empty".into());
        }
        if !self.exact_probabilities && self.n_records == 0 {
            return fail("n_records must be positive for sampled runs".into());
        }
        if self.bootstrap_reps == 1 {
            return fail("bootstrap_reps must be 0 or at least 2".into());
        }
        if self.strategy.ml() && !self.exact_probabilities && self.bootstrap_reps < 2 {
            return fail("ML error bars come from the bootstrap; set bootstrap_reps >= 2".into());
        }
        let homodyne = matches!(self.tomographer, TomographerSpec::Homodyne { .. });
        match (&self.state, homodyne) {
            (StateSpec::TwinBeam { .. }, true) => {}
            (_, true) => return fail("homodyne tomography needs a twin_beam state".into()),
            (StateSpec::TwinBeam { .. }, false) => return fail("twin_beam states need a homodyne tomographer".into()),
            _ => {}
        }
        if homodyne {
            if self.exact_probabilities && self.strategy.ml() {
                return fail("exact-probability ML is only available for finite quorums".into());
            }
            if !matches!(self.detector, DetectorSpec::Photocounter { .. }) {
                return fail("homodyne scenarios need a photon-number-diagonal detector (photocounter)".into());
            }
        } else if matches!(self.detector, DetectorSpec::Photocounter { .. }) {
            return fail("photocounter detectors need a twin_beam state".into());
        }
        for (what, v) in [("svd", self.tolerances.svd), ("exact", self.tolerances.exact)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("tolerance {what} must be positive"));
            }
        }
        if !(self.ml.min_ll_increase >= 0.0) {
            return fail("ml.min_ll_increase must be nonnegative".into());
        }
        Ok(())
    }

    fn stop_rule(&self) -> StopRule {
        StopRule { max_iters: self.ml.max_iters, min_ll_increase: self.ml.min_ll_increase }
    }

    /// Seed for the resampling streams, distinct from the sampling seed.
    pub fn bootstrap_seed(&self) -> u64 {
        self.seed ^ 0x9E37_79B9_7F4A_7C15
    }
}

/// Documented default configuration (the `fig2` scenario).
pub const DEFAULT_CONFIG_TOML: &str = r#"# Scenario name; used in output file names and dataset metadata.
name = "fig2"
# Master seed: sampling uses it directly, bootstrap streams derive from it.
seed = 2024
# Number of simulated joint records.
n_records = 200000
# Feed exact outcome distributions to the estimators (no sampling noise).
exact_probabilities = false
# averaging | ml | both
strategy = "averaging"
# Bootstrap repetitions (0 = analytic error bars only; ML needs >= 2).
bootstrap_reps = 0
# Largest detector outcome k and Fock level n reported in tables and plots.
display_max = 7
# Write the sampled records (dataset.csv + dataset.json) next to the report.
write_dataset = false
# output_dir = "out/fig2"

[state]
# twin_beam (xi, fock_cutoff) | maximally_entangled (dim) | product (dim)
kind = "twin_beam"
xi = 0.88
fock_cutoff = 54

[detector]
# photocounter (eta_p, nu, env_cutoff?) | random (outcomes, seed) | computational | trivial
kind = "photocounter"
eta_p = 0.8
nu = 1.0

[tomographer]
# homodyne (eta_h, grid, ridge) | pauli (depolarizing?) | random_bases (settings, seed, depolarizing?)
kind = "homodyne"
eta_h = 0.9
# Tikhonov weight relative to the largest squared singular value; 0 = plain pseudo-inverse.
ridge = 0.0

[tomographer.grid]
x_min = -8.0
x_max = 8.0
step = 0.001953125

[ml]
# Fock cutoff of the likelihood model (defaults to the state cutoff).
# fock_cutoff = 40
max_iters = 20000
min_ll_increase = 1e-8

[tolerances]
svd = 1e-10
exact = 1e-8
kernel_residual = 1e-4
"#;

pub fn builtin_names() -> &'static [&'static str] {
    &["fig2", "fig4", "qubit-oracle", "qutrit-oracle", "qubit-sampled", "vacuum-gate", "product-gate"]
}

/// Named scenarios shipped with the library.
pub fn builtin(name: &str) -> Result<ScenarioConfig> {
    let fig = |name: &str, strategy, n_records, bootstrap_reps, ml_cutoff| ScenarioConfig {
        name: name.into(),
        seed: 2024,
        n_records,
        exact_probabilities: false,
        strategy,
        bootstrap_reps,
        display_max: 7,
        output_dir: None,
        write_dataset: false,
        state: StateSpec::TwinBeam { xi: 0.88, fock_cutoff: 54 },
        detector: DetectorSpec::Photocounter { eta_p: 0.8, nu: 1.0, env_cutoff: None },
        tomographer: TomographerSpec::Homodyne { eta_h: 0.9, grid: KernelGrid::default(), ridge: 0.0 },
        ml: MlSettings { fock_cutoff: ml_cutoff, ..MlSettings::default() },
        tolerances: Tolerances::default(),
    };
    let finite = |name: &str, dim: usize, exact: bool, n_records, bootstrap_reps, tomographer| ScenarioConfig {
        name: name.into(),
        seed: 7,
        n_records,
        exact_probabilities: exact,
        strategy: Strategy::Averaging,
        bootstrap_reps,
        display_max: 7,
        output_dir: None,
        write_dataset: false,
        state: StateSpec::MaximallyEntangled { dim },
        detector: DetectorSpec::Random { outcomes: 3, seed: 11 },
        tomographer,
        ml: MlSettings::default(),
        tolerances: Tolerances::default(),
    };
    let cfg = match name {
        "fig2" => fig("fig2", Strategy::Averaging, 200_000, 0, None),
        "fig4" => fig("fig4", Strategy::Ml, 50_000, 50, Some(40)),
        "qubit-oracle" => finite("qubit-oracle", 2, true, 0, 0, TomographerSpec::Pauli { depolarizing: None }),
        "qutrit-oracle" => finite(
            "qutrit-oracle",
            3,
            true,
            0,
            0,
            TomographerSpec::RandomBases { settings: 4, seed: 5, depolarizing: None },
        ),
        "qubit-sampled" => finite("qubit-sampled", 2, false, 100_000, 50, TomographerSpec::Pauli { depolarizing: None }),
        "vacuum-gate" => ScenarioConfig {
            name: "vacuum-gate".into(),
            state: StateSpec::TwinBeam { xi: 0.0, fock_cutoff: 10 },
            n_records: 1000,
            ..fig("vacuum-gate", Strategy::Averaging, 1000, 0, None)
        },
        "product-gate" => ScenarioConfig {
            state: StateSpec::Product { dim: 2 },
            ..finite("product-gate", 2, true, 0, 0, TomographerSpec::Pauli { depolarizing: None })
        },
        other => {
            return Err(Error::Validation(format!(
                "unknown scenario `{other}`; known: {}",
                builtin_names().join(", ")
            )))
        }
    };
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Report types

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub subspace: MapSubspace,
    /// `null` in JSON when the map is not injective.
    pub condition_number: f64,
    pub svd_tolerance: f64,
    pub faithful: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_records: u64,
    pub counts_by_n: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Re,
    Im,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorBarSource {
    Analytic,
    Bootstrap,
    /// Exact-probability input; no statistical error.
    None,
}

/// One reconstructed matrix entry `⟨row|P_outcome|col⟩`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryRow {
    pub outcome: usize,
    pub row: usize,
    pub col: usize,
    pub part: Part,
    pub estimate: f64,
    pub stderr: f64,
    pub theory: f64,
    /// `(estimate − theory)/stderr`; for exact inputs, the raw error
    /// divided by the configured exact tolerance.
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlSummary {
    pub iterations: usize,
    pub converged: bool,
    pub final_log_likelihood: f64,
    pub monotone: bool,
    pub constraints_satisfied: bool,
    pub fallback_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reconstruction {
    pub method: Strategy,
    pub error_bars: ErrorBarSource,
    pub entries: Vec<EntryRow>,
    /// Invariant diagnostics of the reported estimate.
    pub povm_report: PovmReport,
    pub fraction_within_3_stderr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ml: Option<MlSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_failures: Option<usize>,
}

impl Reconstruction {
    pub fn entry(&self, outcome: usize, row: usize, col: usize, part: Part) -> Option<&EntryRow> {
        self.entries.iter().find(|e| e.outcome == outcome && e.row == row && e.col == col && e.part == part)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub exact_probabilities: bool,
    pub faithfulness: FaithfulnessReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSummary>,
    pub reconstructions: Vec<Reconstruction>,
    /// Broken invariants; a nonempty list fails the run.
    pub violations: Vec<String>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn reconstruction(&self, method: Strategy) -> Option<&Reconstruction> {
        self.reconstructions.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Wall-clock timings, kept out of the report so reports stay
/// byte-identical across reruns.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timing {
    pub seconds: BTreeMap<String, f64>,
}

/// Everything a run produces.
pub struct RunOutput {
    pub report: RunReport,
    pub dataset: Option<Dataset>,
    pub ml_result: Option<MlResult>,
    pub bootstrap: BTreeMap<String, BootstrapReport>,
    pub timing: Timing,
}

// ---------------------------------------------------------------------------
// Running

struct Stopwatch {
    timing: Timing,
    last: Instant,
}

impl Stopwatch {
    fn new() -> Self {
        Self { timing: Timing::default(), last: Instant::now() }
    }

    fn lap(&mut self, what: &str) {
        let now = Instant::now();
        self.timing.seconds.insert(what.into(), (now - self.last).as_secs_f64());
        self.last = now;
    }
}

/// Runs a scenario and writes its artifacts when `output_dir` is set.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput> {
    let out = execute(config)?;
    if let Some(dir) = &config.output_dir {
        write_artifacts(config, &out, dir)?;
    }
    Ok(out)
}

/// Runs a scenario without touching the file system.
pub fn execute(config: &ScenarioConfig) -> Result<RunOutput> {
    config.validate()?;
    let state = config.state.build()?;
    let truth = config.detector.build(state.dim_system)?;
    match &config.tomographer {
        TomographerSpec::Homodyne { eta_h, grid, ridge } => run_diagonal(config, &state, &truth, *eta_h, *grid, *ridge),
        TomographerSpec::Pauli { depolarizing } => {
            if state.dim_tomo != 2 {
                return Err(Error::Validation("the Pauli quorum needs a qubit tomographer".into()));
            }
            run_finite(config, &state, &truth, &pauli_quorum(), *depolarizing)
        }
        TomographerSpec::RandomBases { settings, seed, depolarizing } => {
            let q = random_quorum(state.dim_tomo, *settings, *seed)?;
            run_finite(config, &state, &truth, &q, *depolarizing)
        }
    }
}

fn faithfulness(map: &MapROperator) -> Result<FaithfulnessReport> {
    if !map.is_faithful() {
        return Err(Error::NotFaithful { condition: map.condition_number });
    }
    Ok(FaithfulnessReport {
        subspace: map.subspace,
        condition_number: map.condition_number,
        svd_tolerance: map.svd_tolerance,
        faithful: true,
    })
}

fn fraction_within(entries: &[EntryRow], k: f64) -> f64 {
    if entries.is_empty() {
        return f64::NAN;
    }
    entries.iter().filter(|e| e.z.abs() <= k).count() as f64 / entries.len() as f64
}

fn z_score(estimate: f64, theory: f64, stderr: f64, exact_tol: f64, source: ErrorBarSource) -> f64 {
    let scale = match source {
        ErrorBarSource::None => exact_tol,
        _ => stderr,
    };
    let d = estimate - theory;
    if d == 0.0 {
        0.0
    } else if scale > 0.0 {
        d / scale
    } else {
        d.signum() * f64::MAX
    }
}

/// Diagonal display entries `(k, n)` with `k, n ≤ display_max`.
fn diagonal_entries(display_max: usize, dim: usize) -> Vec<(usize, usize)> {
    (0..=display_max).flat_map(|k| (0..=display_max.min(dim - 1)).map(move |n| (k, n))).collect()
}

fn run_diagonal(
    config: &ScenarioConfig,
    state: &BipartiteState,
    truth: &Povm,
    eta_h: f64,
    grid: KernelGrid,
    ridge: f64,
) -> Result<RunOutput> {
    let mut clock = Stopwatch::new();
    let map = build_diagonal_map_r(state, config.tolerances.svd);
    let faith = faithfulness(&map)?;
    let dim = state.dim_system;
    let mut notes = Vec::new();
    let mut violations = Vec::new();
    let mut reconstructions = Vec::new();
    let mut bootstraps = BTreeMap::new();
    let mut ml_result = None;
    let theory = |k: usize, n: usize| truth.elements.get(k).map_or(0.0, |p| p.get(n, n).re);
    let shown = diagonal_entries(config.display_max, dim);
    let weights = state.schmidt_weights().expect("twin beam");
    clock.lap("setup");

    let hq = if config.strategy.averaging() {
        let hq = HomodyneQuorum::new(eta_h, dim - 1, grid, ridge)?;
        if hq.kernels.residual > config.tolerances.kernel_residual {
            return Err(Error::KernelConstruction {
                residual: hq.kernels.residual,
                tolerance: config.tolerances.kernel_residual,
            });
        }
        clock.lap("kernels");
        Some(hq)
    } else {
        None
    };

    let data = if config.exact_probabilities {
        None
    } else {
        let d = sample_homodyne_twinbeam(state, truth, eta_h, config.n_records, config.seed, &config.name)?;
        clock.lap("sampling");
        Some(d)
    };

    if let Some(hq) = &hq {
        let (set, source) = match &data {
            Some(d) => (estimate_conditioned_homodyne(d, hq)?, ErrorBarSource::Analytic),
            None => (exact_conditioned_homodyne(state, truth, hq)?, ErrorBarSource::None),
        };
        notes.extend(set.warnings.iter().cloned());
        let rec = recover_povm(&set, &map)?;
        let mut source = source;
        let mut failures = None;
        let mut boot_sd: Option<BTreeMap<(usize, usize), f64>> = None;
        if let (Some(d), true) = (&data, config.bootstrap_reps >= 2) {
            let shown_c = shown.clone();
            let report = bootstrap(d, config.bootstrap_reps, config.bootstrap_seed(), |sample| {
                let set = estimate_conditioned_homodyne(sample, hq)?;
                let rec = recover_povm(&set, &map)?;
                shown_c
                    .iter()
                    .map(|&(k, n)| {
                        rec.element(k).map(|e| e.value.get(n, n).re).ok_or_else(|| {
                            Error::Validation(format!("outcome {k} missing from the resample"))
                        })
                    })
                    .collect()
            })?;
            failures = Some(report.failures.len());
            boot_sd = Some(shown.iter().copied().zip(report.stdev.iter().copied()).collect());
            bootstraps.insert("averaging".to_string(), report);
            source = ErrorBarSource::Bootstrap;
            clock.lap("averaging_bootstrap");
        }
        let mut entries = Vec::new();
        for &(k, n) in &shown {
            let Some(el) = rec.element(k) else { continue };
            let estimate = el.value.get(n, n).re;
            let stderr = match &boot_sd {
                Some(sd) => sd[&(k, n)],
                None => el.stderr.get(n, n).re,
            };
            let t = theory(k, n);
            entries.push(EntryRow {
                outcome: k,
                row: n,
                col: n,
                part: Part::Re,
                estimate,
                stderr,
                theory: t,
                z: z_score(estimate, t, stderr, config.tolerances.exact, source),
            });
            if source == ErrorBarSource::None {
                // the exact limit is off only by the kernel residual
                let p = set.estimates.iter().find(|e| e.outcome == k).map_or(0.0, |e| e.p_hat);
                let bound = hq.kernels.residual * p / weights[n] + config.tolerances.exact;
                if (estimate - t).abs() > bound {
                    violations.push(format!(
                        "averaging: exact-limit entry (k={k}, n={n}) off by {:e} > {bound:e}",
                        (estimate - t).abs()
                    ));
                }
            }
        }
        clock.lap("averaging");
        reconstructions.push(Reconstruction {
            method: Strategy::Averaging,
            error_bars: source,
            fraction_within_3_stderr: fraction_within(&entries, 3.0),
            entries,
            povm_report: rec.report,
            ml: None,
            bootstrap_failures: failures,
        });
    }

    if config.strategy.ml() {
        let d = data.as_ref().expect("validated: ML needs sampled data here");
        let ml_cutoff = config.ml.fock_cutoff.unwrap_or(dim - 1);
        let problem = build_problem_diagonal(d, state, eta_h, ml_cutoff)?;
        let res = maximize(&problem, &problem.uniform_init(), config.stop_rule())?;
        clock.lap("ml");
        let stop = config.stop_rule();
        let report = bootstrap(d, config.bootstrap_reps, config.bootstrap_seed(), |sample| {
            let p = build_problem_diagonal(sample, state, eta_h, ml_cutoff)?;
            let r = maximize(&p, &p.uniform_init(), stop)?;
            Ok(shown.iter().map(|&(k, n)| if n < p.dim { r.diagonal_entry(k, n) } else { 0.0 }).collect())
        })?;
        clock.lap("ml_bootstrap");
        let mut entries = Vec::new();
        for (i, &(k, n)) in shown.iter().enumerate() {
            if res.element(k).is_none() || n >= problem.dim {
                continue;
            }
            let estimate = res.diagonal_entry(k, n);
            let t = theory(k, n);
            let stderr = report.stdev[i];
            entries.push(EntryRow {
                outcome: k,
                row: n,
                col: n,
                part: Part::Re,
                estimate,
                stderr,
                theory: t,
                z: z_score(estimate, t, stderr, config.tolerances.exact, ErrorBarSource::Bootstrap),
            });
        }
        let summary = ml_summary(&res);
        check_ml(&summary, &mut violations);
        if !res.converged {
            notes.push(format!("ml: stopped without converging ({:?})", res.stop_reason));
        }
        reconstructions.push(Reconstruction {
            method: Strategy::Ml,
            error_bars: ErrorBarSource::Bootstrap,
            fraction_within_3_stderr: fraction_within(&entries, 3.0),
            entries,
            povm_report: res.report,
            ml: Some(summary),
            bootstrap_failures: Some(report.failures.len()),
        });
        bootstraps.insert("ml".to_string(), report);
        ml_result = Some(res);
    }

    let report = RunReport {
        scenario: config.name.clone(),
        seed: config.seed,
        exact_probabilities: config.exact_probabilities,
        faithfulness: faith,
        dataset: data.as_ref().map(summarize),
        reconstructions,
        violations,
        notes,
    };
    Ok(RunOutput { report, dataset: data, ml_result, bootstrap: bootstraps, timing: clock.timing })
}

fn summarize(d: &Dataset) -> DatasetSummary {
    DatasetSummary { n_records: d.len() as u64, counts_by_n: d.counts_by_n.clone() }
}

fn ml_summary(res: &MlResult) -> MlSummary {
    MlSummary {
        iterations: res.iterations,
        converged: res.converged,
        final_log_likelihood: res.log_likelihood,
        monotone: res.is_monotone(1e-12),
        constraints_satisfied: res.satisfies_constraints(),
        fallback_steps: res.fallback_steps,
    }
}

fn check_ml(summary: &MlSummary, violations: &mut Vec<String>) {
    if !summary.monotone {
        violations.push("ml: log-likelihood trace decreased".into());
    }
    if !summary.constraints_satisfied {
        violations.push("ml: result violates the POVM constraints".into());
    }
}

/// All real and imaginary parts of a `d × d` element, upper triangle for
/// the imaginary parts (the lower one is fixed by Hermiticity).
fn full_entries(n_outcomes: usize, d: usize) -> Vec<(usize, usize, usize, Part)> {
    let mut v = Vec::new();
    for k in 0..n_outcomes {
        for a in 0..d {
            for b in a..d {
                v.push((k, a, b, Part::Re));
                if a != b {
                    v.push((k, a, b, Part::Im));
                }
            }
        }
    }
    v
}

fn part_of(op: &ComplexOperator, a: usize, b: usize, part: Part) -> f64 {
    let z = op.get(a, b);
    match part {
        Part::Re => z.re,
        Part::Im => z.im,
    }
}

fn run_finite(
    config: &ScenarioConfig,
    state: &BipartiteState,
    truth: &Povm,
    quorum: &FiniteQuorum,
    depolarizing: Option<f64>,
) -> Result<RunOutput> {
    let mut clock = Stopwatch::new();
    let map = build_map_r(state, config.tolerances.svd)?;
    let faith = faithfulness(&map)?;
    let noise = depolarizing.map(|p| NoiseMap::depolarizing(quorum.dim, p, DEFAULT_MAX_NOISE_CONDITION)).transpose()?;
    let duals = compute_dual_set(quorum)?;
    let d = state.dim_system;
    let shown = full_entries(truth.len(), d);
    let mut notes = Vec::new();
    let mut violations = Vec::new();
    let mut reconstructions = Vec::new();
    let mut bootstraps = BTreeMap::new();
    let mut ml_result = None;
    clock.lap("setup");

    let data = if config.exact_probabilities {
        None
    } else {
        let data = sample_finite(state, truth, quorum, noise.as_ref(), config.n_records, config.seed, &config.name)?;
        clock.lap("sampling");
        Some(data)
    };
    let source = if data.is_some() { ErrorBarSource::Analytic } else { ErrorBarSource::None };

    let averaging = |table_or_data: Either<'_>| -> Result<RecoveredPovm> {
        let set = match table_or_data {
            Either::Data(d) => estimate_conditioned_finite(d, quorum, &duals, noise.as_ref())?,
            Either::Table(t) => estimate_conditioned_from_table(t, &duals, noise.as_ref())?,
        };
        recover_povm(&set, &map)
    };
    let collect = |rec: &RecoveredPovm| -> Result<Vec<f64>> {
        shown
            .iter()
            .map(|&(k, a, b, part)| {
                rec.element(k)
                    .map(|e| part_of(&e.value, a, b, part))
                    .ok_or_else(|| Error::Validation(format!("outcome {k} missing from the resample")))
            })
            .collect()
    };

    let exact_table =
        if data.is_none() { Some(FrequencyTable::exact(state, truth, quorum, noise.as_ref())?) } else { None };

    if config.strategy.averaging() {
        let rec = match (&data, &exact_table) {
            (Some(d), _) => averaging(Either::Data(d))?,
            (None, Some(t)) => averaging(Either::Table(t))?,
            _ => unreachable!(),
        };
        notes.extend(rec.warnings.iter().cloned());
        let mut error_bars = source;
        let mut boot_sd = None;
        let mut failures = None;
        if let (Some(d), true) = (&data, config.bootstrap_reps >= 2) {
            let report = bootstrap(d, config.bootstrap_reps, config.bootstrap_seed(), |s| {
                collect(&averaging(Either::Data(s))?)
            })?;
            failures = Some(report.failures.len());
            boot_sd = Some(report.stdev.clone());
            bootstraps.insert("averaging".to_string(), report);
            error_bars = ErrorBarSource::Bootstrap;
            clock.lap("averaging_bootstrap");
        }
        let mut entries = Vec::new();
        for (i, &(k, a, b, part)) in shown.iter().enumerate() {
            let Some(el) = rec.element(k) else { continue };
            let estimate = part_of(&el.value, a, b, part);
            let stderr = match &boot_sd {
                Some(sd) => sd[i],
                None => part_of(&el.stderr, a, b, part),
            };
            let t = part_of(&truth.elements[k], a, b, part);
            entries.push(EntryRow {
                outcome: k,
                row: a,
                col: b,
                part,
                estimate,
                stderr,
                theory: t,
                z: z_score(estimate, t, stderr, config.tolerances.exact, error_bars),
            });
        }
        if error_bars == ErrorBarSource::None {
            for e in entries.iter().filter(|e| (e.estimate - e.theory).abs() > config.tolerances.exact) {
                violations.push(format!(
                    "averaging: exact-limit entry (k={}, {}, {}, {:?}) off by {:e}",
                    e.outcome,
                    e.row,
                    e.col,
                    e.part,
                    (e.estimate - e.theory).abs()
                ));
            }
        }
        clock.lap("averaging");
        reconstructions.push(Reconstruction {
            method: Strategy::Averaging,
            error_bars,
            fraction_within_3_stderr: fraction_within(&entries, 3.0),
            entries,
            povm_report: rec.report,
            ml: None,
            bootstrap_failures: failures,
        });
    }

    if config.strategy.ml() {
        let stop = config.stop_rule();
        let problem = match (&data, &exact_table) {
            (Some(d), _) => build_problem_finite(d, state, quorum, noise.as_ref())?,
            (None, Some(t)) => problem_from_table(t, state, quorum, noise.as_ref())?,
            _ => unreachable!(),
        };
        let res = maximize(&problem, &problem.uniform_init(), stop)?;
        clock.lap("ml");
        let mut boot_sd = None;
        let mut failures = None;
        if let (Some(d), true) = (&data, config.bootstrap_reps >= 2) {
            let report = bootstrap(d, config.bootstrap_reps, config.bootstrap_seed(), |s| {
                let p = build_problem_finite(s, state, quorum, noise.as_ref())?;
                let r = maximize(&p, &p.uniform_init(), stop)?;
                Ok(shown
                    .iter()
                    .map(|&(k, a, b, part)| r.element(k).map_or(0.0, |e| part_of(e, a, b, part)))
                    .collect())
            })?;
            failures = Some(report.failures.len());
            boot_sd = Some(report.stdev.clone());
            bootstraps.insert("ml".to_string(), report);
            clock.lap("ml_bootstrap");
        }
        let error_bars = if boot_sd.is_some() { ErrorBarSource::Bootstrap } else { ErrorBarSource::None };
        let mut entries = Vec::new();
        for (i, &(k, a, b, part)) in shown.iter().enumerate() {
            let Some(el) = res.element(k) else { continue };
            let estimate = part_of(el, a, b, part);
            let stderr = boot_sd.as_ref().map_or(0.0, |sd| sd[i]);
            let t = part_of(&truth.elements[k], a, b, part);
            entries.push(EntryRow {
                outcome: k,
                row: a,
                col: b,
                part,
                estimate,
                stderr,
                theory: t,
                z: z_score(estimate, t, stderr, config.tolerances.exact, error_bars),
            });
        }
        let summary = ml_summary(&res);
        check_ml(&summary, &mut violations);
        if !res.converged {
            notes.push(format!("ml: stopped without converging ({:?})", res.stop_reason));
        }
        reconstructions.push(Reconstruction {
            method: Strategy::Ml,
            error_bars,
            fraction_within_3_stderr: fraction_within(&entries, 3.0),
            entries,
            povm_report: res.report,
            ml: Some(summary),
            bootstrap_failures: failures,
        });
        ml_result = Some(res);
    }

    let report = RunReport {
        scenario: config.name.clone(),
        seed: config.seed,
        exact_probabilities: config.exact_probabilities,
        faithfulness: faith,
        dataset: data.as_ref().map(summarize),
        reconstructions,
        violations,
        notes,
    };
    Ok(RunOutput { report, dataset: data, ml_result, bootstrap: bootstraps, timing: clock.timing })
}

enum Either<'a> {
    Data(&'a Dataset),
    Table(&'a FrequencyTable),
}

/// Finite ML problem whose counts are exact joint probabilities.
pub fn problem_from_table(
    table: &FrequencyTable,
    state: &BipartiteState,
    quorum: &FiniteQuorum,
    noise: Option<&NoiseMap>,
) -> Result<MlProblem> {
    let effects = crate::sampler::tomographer_effects(state, quorum, noise)?;
    let marginal = table.outcome_marginal();
    let labels: Vec<Option<usize>> =
        (0..table.n_outcomes).filter(|&n| marginal[n] > 0.0).map(Some).chain(std::iter::once(None)).collect();
    let mut counts: Vec<Vec<f64>> = labels.iter().flatten().map(|&n| table.freq[n].clone()).collect();
    counts.push(vec![0.0; effects.len()]);
    Ok(MlProblem { dim: state.dim_system, labels, n_records: 0, data: ProblemData::Finite(FiniteData { effects, counts }) })
}

// ---------------------------------------------------------------------------
// Output files

/// Result of [`emit_plot_data`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub note: Option<String>,
}

/// One CSV per reconstruction method and detector outcome, with columns
/// `n,estimate,stderr,theory` over the reported diagonal levels.
pub fn emit_plot_data(report: &RunReport, dir: &Path) -> Result<PlotOutput> {
    let mut files = Vec::new();
    for rec in &report.reconstructions {
        let method = match rec.method {
            Strategy::Averaging => "averaging",
            Strategy::Ml => "ml",
            Strategy::Both => "both",
        };
        let mut by_outcome: BTreeMap<usize, Vec<&EntryRow>> = BTreeMap::new();
        for e in rec.entries.iter().filter(|e| e.row == e.col && e.part == Part::Re) {
            by_outcome.entry(e.outcome).or_default().push(e);
        }
        for (k, rows) in by_outcome {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("{method}_outcome_{k}.csv"));
            let mut text = String::from("n,estimate,stderr,theory\n");
            for e in rows {
                text.push_str(&format!("{},{:?},{:?},{:?}\n", e.row, e.estimate, e.stderr, e.theory));
            }
            fs::write(&path, text)?;
            files.push(path);
        }
    }
    let note = files.is_empty().then(|| "no reconstructed outcomes; no plot data written".to_string());
    Ok(PlotOutput { files, note })
}

/// Writes `config.toml`, `report.json`, plot CSVs, bootstrap and ML
/// details, `timing.json` and optionally the dataset.
pub fn write_artifacts(config: &ScenarioConfig, out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    put("config.toml", config.to_toml()?)?;
    put("report.json", out.report.to_json()?)?;
    let json = |v: &dyn erased::Json| v.to_json();
    if let Some(ml) = &out.ml_result {
        put("ml_result.json", ml.to_json()?)?;
    }
    if !out.bootstrap.is_empty() {
        put("bootstrap.json", json(&out.bootstrap)?)?;
    }
    put("timing.json", json(&out.timing)?)?;
    if let (true, Some(d)) = (config.write_dataset, &out.dataset) {
        let mut buf = Vec::new();
        d.write_csv(&mut buf)?;
        put("dataset.csv", String::from_utf8(buf).expect("ascii csv"))?;
        let mut params = BTreeMap::new();
        params.insert("config".to_string(), serde_json::to_value(config).map_err(|e| Error::Parse(e.to_string()))?);
        put("dataset.json", json(&d.sidecar(params))?)?;
    }
    let plots = emit_plot_data(&out.report, dir)?;
    written.extend(plots.files);
    if let Some(note) = plots.note {
        let p = dir.join("plots_note.txt");
        fs::write(&p, note + "\n")?;
        written.push(p);
    }
    Ok(written)
}

mod erased {
    use crate::error::{Error, Result};

    pub trait Json {
        fn to_json(&self) -> Result<String>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> Result<String> {
            serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_is_the_fig2_scenario() {
        let parsed = ScenarioConfig::from_toml(DEFAULT_CONFIG_TOML).unwrap();
        assert_eq!(parsed, builtin("fig2").unwrap());
    }

    #[test]
    fn config_round_trips_through_toml() {
        for name in builtin_names() {
            let cfg = builtin(name).unwrap();
            let back = ScenarioConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = builtin("fig4").unwrap();
        cfg.bootstrap_reps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = builtin("fig2").unwrap();
        cfg.tomographer = TomographerSpec::Pauli { depolarizing: None };
        assert!(cfg.validate().is_err());
        assert!(ScenarioConfig::from_toml("name = 1").is_err());
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn qubit_oracle_is_exact() {
        let out = execute(&builtin("qubit-oracle").unwrap()).unwrap();
        assert!(out.report.violations.is_empty(), "{:?}", out.report.violations);
        let rec = out.report.reconstruction(Strategy::Averaging).unwrap();
        assert_eq!(rec.entries.len(), 3 * 4);
        assert!(rec.entries.iter().all(|e| (e.estimate - e.theory).abs() < 1e-8));
    }

    #[test]
    fn gates_refuse_unfaithful_states() {
        for name in ["vacuum-gate", "product-gate"] {
            match execute(&builtin(name).unwrap()) {
                Err(Error::NotFaithful { condition }) => assert!(condition.is_infinite()),
                other => panic!("{name}: {:?}", other.map(|o| o.report)),
            }
        }
    }

    #[test]
    fn auto_env_cutoff_meets_tail_bound() {
        let c = auto_env_cutoff(1.0);
        assert!(thermal_tail(1.0, c) < THERMAL_TAIL_TOL);
        assert!(thermal_tail(1.0, c - 1) >= THERMAL_TAIL_TOL);
        assert_eq!(auto_env_cutoff(0.0), 0);
    }

    #[test]
    fn empty_report_writes_no_plots() {
        let report = RunReport {
            scenario: "x".into(),
            seed: 0,
            exact_probabilities: true,
            faithfulness: FaithfulnessReport {
                subspace: MapSubspace::Full,
                condition_number: 1.0,
                svd_tolerance: 1e-10,
                faithful: true,
            },
            dataset: None,
            reconstructions: Vec::new(),
            violations: Vec::new(),
            notes: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let out = emit_plot_data(&report, dir.path()).unwrap();
        assert!(out.files.is_empty());
        assert!(out.note.is_some());
    }
}
