#![no_main]

use libfuzzer_sys::fuzz_target;
use qcalib::sampler::{parse_sidecar, Dataset};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(sidecar) = parse_sidecar(text) else { return };
    let json = serde_json::to_string(&sidecar).expect("sidecar serializes");
    parse_sidecar(&json).expect("serialized sidecar parses");
    // an empty record file must be accepted exactly when the sidecar claims no records
    let empty = Dataset::from_parts("n,k,result\n".as_bytes(), &sidecar);
    if sidecar.n_records == 0 && sidecar.counts_by_n.iter().all(|&c| c == 0) {
        assert!(empty.is_ok());
    } else {
        assert!(empty.is_err());
    }
});
