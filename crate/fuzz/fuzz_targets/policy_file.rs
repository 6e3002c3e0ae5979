#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::ppo::{ActorCritic, FEATURE_DIM};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(net) = ActorCritic::from_json(text) {
        let _ = net.distribution(&[0.0; FEATURE_DIM]);
        let _ = net.value_of(&[0.0; FEATURE_DIM]);
    }
});
