#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::judge::parse_verdict_response;

fuzz_target!(|data: &[u8]| {
    if let Ok(body) = std::str::from_utf8(data) {
        let _ = parse_verdict_response(body);
    }
});
