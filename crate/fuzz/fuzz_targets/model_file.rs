#![no_main]

use libfuzzer_sys::fuzz_target;
use trafficpref::caption::parse_caption;
use trafficpref::reward_model::{RewardModel, Scoring};

const CAPTION: &str = "phase=NS_S; elapsed=12s; q=[N:5,E:2,S:4,W:0]veh; p=[N:3,E:1,S:2,W:-1]; delay=8.4s; thru=12veh/30s; ttc_p10=1.62s; ttc_p50=4.10s; brakes=2; red_risk=0; near_v=6.30m/s; near_a=-1.20m/s2; near_d=18.5m";

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = RewardModel::from_json(text) {
        // A model that loads must be able to score.
        let _ = model.score_fields(&parse_caption(CAPTION).unwrap());
    }
});
