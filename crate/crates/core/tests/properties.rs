use proptest::prelude::*;

use trafficpref::caption::{extract_unstructured, parse_any, parse_caption, shuffled_no_units, unstructured_caption, CaptionFields};
use trafficpref::jsonl;
use trafficpref::pairs::parse_pool;
use trafficpref::judge::parse_pref_dataset;
use trafficpref::sim::record::parse_episode_log;
use trafficpref::sim::{init_network, Phase, SimConfig};

fn fields() -> impl Strategy<Value = CaptionFields> {
    (
        (0usize..4, 0u32..90, prop::array::uniform4(0u32..40), prop::array::uniform4(-30i32..40)),
        (0u32..3000, 0u32..30, 0u32..1000, 0u32..1000, 0u32..9, any::<bool>()),
        (0u32..1700, -600i32..300, 0u32..1500),
    )
        .prop_map(|((ph, elapsed, q, p), (delay, thru, t10, t50, brakes, red_risk), (v, a, d))| {
            let (lo, hi) = (t10.min(t50), t10.max(t50));
            CaptionFields {
                phase: Phase::ALL[ph],
                elapsed,
                q,
                p,
                delay: f64::from(delay) / 10.0,
                thru,
                ttc_p10: f64::from(lo) / 100.0,
                ttc_p50: f64::from(hi) / 100.0,
                brakes,
                red_risk,
                near_v: f64::from(v) / 100.0,
                near_a: f64::from(a) / 100.0,
                near_d: f64::from(d) / 10.0,
            }
        })
}

proptest! {
    #[test]
    fn canonical_render_round_trips(f in fields()) {
        let text = f.render();
        prop_assert_eq!(parse_caption(&text).unwrap(), f.clone());
        prop_assert_eq!(parse_any(&text).unwrap(), f);
    }

    #[test]
    fn prose_extraction_recovers_fields(f in fields(), style in any::<u64>()) {
        let text = unstructured_caption(&f, style);
        prop_assert_eq!(extract_unstructured(&text).unwrap(), f.clone());
        prop_assert_eq!(parse_any(&text).unwrap(), f);
    }

    #[test]
    fn shuffled_text_keeps_every_slot(f in fields(), seed in any::<u64>()) {
        let s = shuffled_no_units(&f, seed);
        prop_assert_eq!(s.split("; ").count(), 13);
    }

    #[test]
    fn caption_readers_never_panic(s in "\\PC*") {
        let _ = parse_caption(&s);
        let _ = parse_any(&s);
        let _ = extract_unstructured(&s);
    }

    #[test]
    fn caption_like_noise_never_panics(s in "(phase=|q=\\[|N:|; |[0-9.\\-]{1,6}|s|veh|m/s2?|red_risk=|ttc_p10=){0,40}") {
        let _ = parse_caption(&s);
        let _ = parse_any(&s);
    }

    #[test]
    fn record_readers_never_panic(s in "(\\{|\\}|\"[a-z_]{1,12}\"|:|,|[0-9]{1,4}|\\[|\\]|\n|null|true){0,60}") {
        let _ = parse_pool(&s);
        let _ = parse_pref_dataset(&s);
        let _ = parse_episode_log(&s);
        let _ = jsonl::parse::<serde_json::Value>(&s);
    }

    #[test]
    fn scenario_reader_never_panics(s in "\\PC*") {
        let _ = SimConfig::from_toml(&s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn conservation_under_random_control(
        rows in 1usize..3,
        cols in 1usize..3,
        rate in 0.0f64..0.4,
        seed in any::<u64>(),
        actions in prop::collection::vec(0usize..4, 64),
    ) {
        let cfg = SimConfig { grid_rows: rows, grid_cols: cols, arrival_rate_per_entry: rate, horizon_s: 240.0, seed, ..SimConfig::default() };
        let mut s = init_network(cfg).unwrap();
        let mut k = 0;
        while !s.is_done() {
            let a: Vec<Phase> = (0..s.num_junctions()).map(|j| Phase::ALL[actions[(k + j) % actions.len()]]).collect();
            k += 1;
            let (obs, _) = s.step(&a);
            prop_assert!(s.check_invariants().is_ok(), "{:?}", s.check_invariants());
            prop_assert_eq!(s.spawned(), s.completed() + (s.vehicles_on_network() + s.vehicles_waiting_to_enter()) as u64);
            for o in &obs {
                prop_assert!(o.is_finite());
                prop_assert!(o.ttc_p10 <= o.ttc_p50);
            }
        }
        let m = s.metrics();
        prop_assert!((0.0..=1.0).contains(&m.oscillation));
        prop_assert!(m.att.is_none_or(|a| a > 0.0));
    }
}
