//! End-to-end runs through the scenario layer.

use std::fs;

use qcalib::detectors::noisy_photocounter;
use qcalib::quorum::{HomodyneQuorum, KernelGrid};
use qcalib::recon_avg::{estimate_conditioned_homodyne, exact_conditioned_homodyne, recover_povm};
use qcalib::recon_ml::{build_problem_diagonal, maximize, StopRule};
use qcalib::sampler::{parse_sidecar, sample_homodyne_twinbeam, Dataset};
use qcalib::scenario::{builtin, execute, run, DetectorSpec, ErrorBarSource, StateSpec, Strategy, TomographerSpec};
use qcalib::states::{build_diagonal_map_r, twin_beam};
use qcalib::Error;

#[test]
fn noisy_tomographer_is_corrected() {
    let mut cfg = builtin("qutrit-oracle").unwrap();
    cfg.tomographer = TomographerSpec::RandomBases { settings: 4, seed: 5, depolarizing: Some(0.2) };
    let out = execute(&cfg).unwrap();
    assert!(out.report.violations.is_empty(), "{:?}", out.report.violations);
}

#[test]
fn exact_ml_and_averaging_agree_on_qubits() {
    let mut cfg = builtin("qubit-oracle").unwrap();
    cfg.strategy = Strategy::Both;
    cfg.ml.min_ll_increase = 1e-14;
    let out = execute(&cfg).unwrap();
    let ml = out.report.reconstruction(Strategy::Ml).unwrap();
    assert!(ml.ml.as_ref().unwrap().monotone);
    for e in &ml.entries {
        assert!((e.estimate - e.theory).abs() < 1e-4, "{e:?}");
    }
}

#[test]
fn sampled_run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = builtin("qubit-sampled").unwrap();
    cfg.n_records = 5000;
    cfg.bootstrap_reps = 10;
    cfg.write_dataset = true;
    cfg.output_dir = Some(dir.path().to_path_buf());
    let out = run(&cfg).unwrap();
    let rec = out.report.reconstruction(Strategy::Averaging).unwrap();
    assert_eq!(rec.error_bars, ErrorBarSource::Bootstrap);
    for f in ["config.toml", "report.json", "bootstrap.json", "timing.json", "dataset.csv", "dataset.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let sidecar = parse_sidecar(&fs::read_to_string(dir.path().join("dataset.json")).unwrap()).unwrap();
    let back = Dataset::from_parts(fs::File::open(dir.path().join("dataset.csv")).unwrap(), &sidecar).unwrap();
    assert_eq!(back.records, out.dataset.unwrap().records);
    // rerunning the written config reproduces the report byte for byte
    let again = tempfile::tempdir().unwrap();
    let mut cfg2 = qcalib::scenario::ScenarioConfig::load(&dir.path().join("config.toml")).unwrap();
    cfg2.output_dir = Some(again.path().to_path_buf());
    run(&cfg2).unwrap();
    assert_eq!(
        fs::read(dir.path().join("report.json")).unwrap(),
        fs::read(again.path().join("report.json")).unwrap()
    );
}

#[test]
fn small_homodyne_run_tracks_the_detector() {
    let mut cfg = builtin("fig2").unwrap();
    cfg.state = StateSpec::TwinBeam { xi: 0.6, fock_cutoff: 20 };
    cfg.n_records = 50_000;
    cfg.display_max = 4;
    let out = execute(&cfg).unwrap();
    let rec = out.report.reconstruction(Strategy::Averaging).unwrap();
    assert_eq!(rec.entries.len(), 25);
    assert!(rec.fraction_within_3_stderr >= 0.8, "{}", rec.fraction_within_3_stderr);
}

#[test]
fn exact_homodyne_limit_matches_truth() {
    let mut cfg = builtin("fig2").unwrap();
    cfg.state = StateSpec::TwinBeam { xi: 0.5, fock_cutoff: 16 };
    cfg.exact_probabilities = true;
    let out = execute(&cfg).unwrap();
    assert!(out.report.violations.is_empty(), "{:?}", out.report.violations);
}

#[test]
fn homodyne_estimates_converge_to_the_exact_limit() {
    let s = twin_beam(0.5, 12).unwrap();
    let truth = noisy_photocounter(0.8, 0.5, 12, 30).unwrap();
    let hq = HomodyneQuorum::new(0.9, 12, KernelGrid::default(), 0.0).unwrap();
    let map = build_diagonal_map_r(&s, 1e-10);
    let exact = recover_povm(&exact_conditioned_homodyne(&s, &truth, &hq).unwrap(), &map).unwrap();
    let data = sample_homodyne_twinbeam(&s, &truth, 0.9, 100_000, 3, "conv").unwrap();
    let est = recover_povm(&estimate_conditioned_homodyne(&data, &hq).unwrap(), &map).unwrap();
    let (mut inside, mut total) = (0, 0);
    for e in &est.elements {
        let x = exact.element(e.outcome).unwrap();
        for n in 0..4 {
            total += 1;
            let d = (e.value.get(n, n).re - x.value.get(n, n).re).abs();
            if d <= 3.0 * e.stderr.get(n, n).re {
                inside += 1;
            }
        }
    }
    assert!(inside as f64 >= 0.9 * total as f64, "{inside}/{total}");
}

#[test]
fn diagonal_ml_is_feasible_and_close() {
    let s = twin_beam(0.5, 20).unwrap();
    let truth = noisy_photocounter(0.8, 0.5, 20, 30).unwrap();
    let data = sample_homodyne_twinbeam(&s, &truth, 0.9, 20_000, 4, "ml").unwrap();
    let p = build_problem_diagonal(&data, &s, 0.9, 14).unwrap();
    let res = maximize(&p, &p.uniform_init(), StopRule::default()).unwrap();
    assert!(res.is_monotone(1e-12));
    assert!(res.satisfies_constraints());
    // the most populated entries are pinned down well at this size
    for k in 0..2 {
        let err = (res.diagonal_entry(k, 0) - truth.elements[k].get(0, 0).re).abs();
        assert!(err < 0.05, "k={k}: {err}");
    }
}

#[test]
fn ml_cutoff_must_cover_the_state_tail() {
    let s = twin_beam(0.88, 54).unwrap();
    let truth = noisy_photocounter(0.8, 1.0, 54, 27).unwrap();
    let data = sample_homodyne_twinbeam(&s, &truth, 0.9, 100, 1, "tail").unwrap();
    assert!(matches!(build_problem_diagonal(&data, &s, 0.9, 20), Err(Error::TailMass { .. })));
}

#[test]
fn configs_are_checked_before_running() {
    let mut cfg = builtin("qubit-oracle").unwrap();
    cfg.detector = DetectorSpec::Photocounter { eta_p: 0.8, nu: 1.0, env_cutoff: None };
    assert!(matches!(execute(&cfg), Err(Error::Validation(_))));
}

#[test]
fn qubit_ml_is_within_five_bootstrap_stderr() {
    let mut cfg = builtin("qubit-sampled").unwrap();
    cfg.strategy = Strategy::Ml;
    cfg.bootstrap_reps = 20;
    let out = execute(&cfg).unwrap();
    assert!(out.report.violations.is_empty(), "{:?}", out.report.violations);
    let rec = out.report.reconstruction(Strategy::Ml).unwrap();
    for e in &rec.entries {
        assert!((e.estimate - e.theory).abs() < 5.0 * e.stderr, "{e:?}");
    }
}

/// Characterization of the truncation bias: a likelihood model whose Fock
/// cutoff hides most of the pair-number tail fits the data it can explain
/// and misses the detector by far more than a well-truncated model does.
#[test]
fn truncated_model_is_biased() {
    let s = twin_beam(0.7, 30).unwrap();
    let truth = noisy_photocounter(0.8, 0.5, 30, 30).unwrap();
    let data = sample_homodyne_twinbeam(&s, &truth, 0.9, 20_000, 8, "bias").unwrap();
    let error = |ml_state: &qcalib::states::BipartiteState, cutoff: usize| {
        let p = build_problem_diagonal(&data, ml_state, 0.9, cutoff).unwrap();
        let res = maximize(&p, &p.uniform_init(), StopRule::default()).unwrap();
        (0..3)
            .flat_map(|k| (0..3).map(move |n| (k, n)))
            .map(|(k, n)| (res.diagonal_entry(k, n) - truth.elements[k].get(n, n).re).abs())
            .fold(0.0, f64::max)
    };
    let good = error(&s, 20);
    // pretend a 3-level model is complete to get past the tail check
    let mut short = twin_beam(0.7, 2).unwrap();
    short.truncation_deficit = 0.0;
    let bad = error(&short, 2);
    println!("max error: cutoff 20 {good:.4}, cutoff 2 {bad:.4}");
    assert!(bad > 2.0 * good, "cutoff 2 error {bad} vs cutoff 20 error {good}");
}
