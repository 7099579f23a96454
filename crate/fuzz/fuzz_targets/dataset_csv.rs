#![no_main]

use libfuzzer_sys::fuzz_target;
use qcalib::sampler::{parse_dataset_csv, Dataset, DatasetKind};

fuzz_target!(|data: &[u8]| {
    for kind in [DatasetKind::Finite, DatasetKind::Homodyne] {
        let Ok(records) = parse_dataset_csv(data, kind) else { continue };
        let ds = Dataset::new(kind, records, 0, "fuzz");
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).expect("write parsed records");
        let back = parse_dataset_csv(buf.as_slice(), kind).expect("reparse written records");
        assert_eq!(back, ds.records);
    }
});
