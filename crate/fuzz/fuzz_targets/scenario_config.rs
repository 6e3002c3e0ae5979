#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::sim::SimConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = SimConfig::from_toml(text) {
        let again = SimConfig::from_toml(&cfg.to_toml()).expect("rendered config parses");
        assert_eq!(again, cfg);
    }
});
