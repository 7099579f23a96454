#![no_main]

use libfuzzer_sys::fuzz_target;
use qcalib::scenario::ScenarioConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ScenarioConfig::from_toml(text) else { return };
    // anything accepted must serialize back to a config that parses to the same TOML
    let once = cfg.to_toml().expect("accepted config serializes");
    let again = ScenarioConfig::from_toml(&once).expect("serialized config parses");
    assert_eq!(once, again.to_toml().unwrap());
});
