#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::sim::record::parse_episode_log;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_episode_log(text);
    }
});
