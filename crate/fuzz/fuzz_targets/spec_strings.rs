#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::harness::{JudgeSpec, Matrix, ScenarioId};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(id) = s.parse::<ScenarioId>() {
        assert_eq!(id.to_string().parse::<ScenarioId>().unwrap(), id);
    }
    if let Ok(j) = s.parse::<JudgeSpec>() {
        let _ = j.validate();
    }
    let _ = s.parse::<Matrix>();
});
