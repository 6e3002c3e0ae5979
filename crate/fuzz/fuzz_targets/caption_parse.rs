#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::caption::{parse_any, parse_caption};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(fields) = parse_caption(text) {
        // Only canonical text parses, so rendering gives the input back.
        assert_eq!(fields.render(), text);
    }
    let _ = parse_any(text);
});
