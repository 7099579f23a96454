//! Replays the checked-in fuzz seeds through the parsers with the same
//! invariants the fuzz targets assert.

use std::fs;
use std::path::PathBuf;

use qcalib::sampler::{parse_dataset_csv, parse_sidecar, Dataset, DatasetKind};
use qcalib::scenario::ScenarioConfig;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.into_iter().map(|p| {
        let bytes = fs::read(&p).unwrap();
        (p, bytes)
    }).collect()
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (path, bytes) in corpus("config_toml") {
        let cfg = ScenarioConfig::from_toml(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let once = cfg.to_toml().unwrap();
        assert_eq!(once, ScenarioConfig::from_toml(&once).unwrap().to_toml().unwrap());
    }
}

#[test]
fn csv_seeds_round_trip_when_accepted() {
    let mut accepted = 0;
    for (_, bytes) in corpus("dataset_csv") {
        for kind in [DatasetKind::Finite, DatasetKind::Homodyne] {
            let Ok(records) = parse_dataset_csv(bytes.as_slice(), kind) else { continue };
            accepted += 1;
            let ds = Dataset::new(kind, records, 0, "seed");
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            assert_eq!(parse_dataset_csv(buf.as_slice(), kind).unwrap(), ds.records);
        }
    }
    assert!(accepted >= 3);
}

#[test]
fn sidecar_seeds_parse() {
    for (path, bytes) in corpus("dataset_sidecar") {
        let s = parse_sidecar(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(parse_sidecar(&json).unwrap(), s);
    }
}

#[test]
fn sampled_seed_matches_its_sidecar() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let sidecar = parse_sidecar(&fs::read_to_string(dir.join("dataset_sidecar/finite.json")).unwrap()).unwrap();
    let csv = fs::read(dir.join("dataset_csv/sampled.csv")).unwrap();
    let ds = Dataset::from_parts(csv.as_slice(), &sidecar).unwrap();
    assert_eq!(ds.len() as u64, sidecar.n_records);
}
