#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::caption::extract_unstructured;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = extract_unstructured(text);
    }
});
