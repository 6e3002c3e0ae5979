#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::harness::ExperimentSpec;

fuzz_target!(|data: &[u8]| {
    if data.len() > 64 * 1024 {
        return;
    }
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = ExperimentSpec::from_toml(text) {
        let _ = spec.validate();
    }
});
