#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::judge::parse_pref_dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_pref_dataset(text) {
        for r in &records {
            assert!(r.y == 1 || r.y == 2);
            assert!(r.w > 0.0);
        }
    }
});
