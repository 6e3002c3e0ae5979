use super::*;

fn config(rows: usize, cols: usize, rate: f64, seed: u64) -> SimConfig {
    SimConfig {
        grid_rows: rows,
        grid_cols: cols,
        arrival_rate_per_entry: rate,
        seed,
        ..SimConfig::default()
    }
}

fn hold(state: &SimState) -> Vec<Phase> {
    (0..state.num_junctions()).map(|j| state.current_phase(j)).collect()
}

#[test]
fn init_state() {
    let s = init_network(config(1, 1, 0.1, 0)).unwrap();
    assert_eq!(s.num_junctions(), 1);
    assert_eq!(s.network.approach_lane_count(), 8);
    let ps = s.phase_state(0);
    assert_eq!(ps.phase_id, Phase::EwStraight);
    assert_eq!(ps.signal_stage, SignalStage::Green);
    assert_eq!(ps.elapsed, 0.0);
    assert_eq!(init_network(config(0, 1, 0.1, 0)).unwrap_err().field, "grid_rows");
}

#[test]
fn keep_resets_green_without_transition() {
    let mut s = init_network(config(1, 1, 0.0, 0)).unwrap();
    for _ in 0..30 {
        let ev = s.advance(&[Phase::NsLeft]);
        assert_eq!(ev.junctions[0].decision, None);
    }
    assert!(s.at_decision_point(0));
    let ev = s.advance(&[Phase::EwStraight]);
    assert_eq!(ev.junctions[0].decision, Some(Decision::Keep));
    let ps = s.phase_state(0);
    assert_eq!((ps.phase_id, ps.signal_stage, ps.elapsed), (Phase::EwStraight, SignalStage::Green, 1.0));
}

#[test]
fn switch_follows_protocol() {
    let mut s = init_network(config(1, 1, 0.0, 0)).unwrap();
    for _ in 0..30 {
        s.advance(&[Phase::EwStraight]);
    }
    let mut trace = Vec::new();
    for _ in 0..35 {
        let ev = s.advance(&[Phase::NsStraight]);
        let ps = s.phase_state(0);
        trace.push((ps.phase_id, ps.signal_stage, ps.elapsed, ev.junctions[0].decision));
    }
    use SignalStage::*;
    let ew = Phase::EwStraight;
    let ns = Phase::NsStraight;
    let mut want = vec![
        (ew, Yellow, 1.0, Some(Decision::Switch)),
        (ew, Yellow, 2.0, None),
        (ew, Allred, 0.0, None),
        (ew, Allred, 1.0, None),
        (ns, Green, 0.0, None),
    ];
    want.extend((1..=30).map(|k| (ns, Green, f64::from(k), None)));
    assert_eq!(trace, want);
    assert!(s.at_decision_point(0));
}

#[test]
fn empty_network_stays_empty() {
    let mut s = init_network(config(2, 2, 0.0, 3)).unwrap();
    for _ in 0..200 {
        let (obs, _) = s.step(&fixed_time_actions(&s));
        for o in obs {
            assert_eq!(o.q, [0; 4]);
            assert_eq!(o.p, [0; 4]);
            assert_eq!(o.mean_delay, 0.0);
            assert_eq!(o.ttc_p10, TTC_CAP);
        }
    }
}

#[test]
fn invariants_hold_under_random_control() {
    use rand::{Rng as _, SeedableRng};
    let mut rng = crate::rng::Rng::seed_from_u64(9);
    let mut s = init_network(config(2, 2, 0.25, 1)).unwrap();
    while !s.is_done() {
        let actions: Vec<Phase> = (0..4).map(|_| Phase::ALL[rng.random_range(0..4)]).collect();
        let (obs, _) = s.step(&actions);
        s.check_invariants().unwrap();
        for o in &obs {
            assert!(o.is_finite());
            assert!(o.ttc_p10 <= o.ttc_p50);
        }
    }
    assert!(s.completed() > 0);
    let m = s.metrics();
    assert!(m.att.unwrap() > 0.0);
    assert!((0.0..=1.0).contains(&m.oscillation));
}

#[test]
fn runs_are_reproducible() {
    let run = || {
        let mut s = init_network(config(2, 2, 0.2, 42)).unwrap();
        let mut out = String::new();
        for _ in 0..300 {
            let (obs, _) = s.step(&fixed_time_actions(&s));
            out.push_str(&serde_json::to_string(&obs).unwrap());
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn vehicles_stop_on_red() {
    let mut s = init_network(config(1, 1, 0.0, 0)).unwrap();
    let j = &s.network.junctions[0];
    let ns = s.lane_of(j.incoming[Side::N.index()], Some(Movement::Straight)).unwrap();
    s.place_vehicle(ns, 60.0, 10.0).unwrap();
    for _ in 0..25 {
        s.advance(&hold(&s));
        s.check_invariants().unwrap();
    }
    let v = s.lane_vehicles(ns).next().unwrap();
    assert!(v.speed < STOP_SPEED, "speed {}", v.speed);
    assert!(v.position <= s.config.link_length);
    assert!(v.position > s.config.link_length - 3.0);
    assert_eq!(s.observe(0).q[Side::N.index()], 1);
}

#[test]
fn vehicles_cross_on_green_and_exit() {
    let mut s = init_network(config(1, 1, 0.0, 0)).unwrap();
    let j = &s.network.junctions[0];
    let w = s.lane_of(j.incoming[Side::W.index()], Some(Movement::Straight)).unwrap();
    s.place_vehicle(w, 100.0, 10.0).unwrap();
    let mut crossed = 0;
    for _ in 0..28 {
        crossed += s.advance(&hold(&s)).junctions[0].crossed;
    }
    assert_eq!(crossed, 1);
    assert_eq!(s.completed(), 1);
    assert_eq!(s.log().travel_times.len(), 1);
}

#[test]
fn pressure_counts_in_minus_out() {
    let mut s = init_network(config(1, 1, 0.0, 0)).unwrap();
    let j = s.network.junctions[0].clone();
    let lane_in = |s: &SimState, side: Side, m| s.lane_of(j.incoming[side.index()], Some(m)).unwrap();
    let n_s = lane_in(&s, Side::N, Movement::Straight);
    let n_l = lane_in(&s, Side::N, Movement::Left);
    let e_s = lane_in(&s, Side::E, Movement::Straight);
    // Northern arrivals head south, onto the outgoing link on the S side.
    let out_s = s.lane_of(j.outgoing[Side::S.index()], None).unwrap();
    s.place_vehicle(n_s, 50.0, 0.0).unwrap();
    s.place_vehicle(n_s, 40.0, 0.0).unwrap();
    s.place_vehicle(n_l, 50.0, 0.0).unwrap();
    s.place_vehicle(e_s, 50.0, 0.0).unwrap();
    s.place_vehicle(out_s, 20.0, 0.0).unwrap();
    let o = s.observe(0);
    assert_eq!(o.p, [2, 1, 0, 0]);
    assert_eq!(pressure_reward(&o), -3.0);
}

#[test]
fn doubling_demand_does_not_shrink_queues() {
    let aql = |rate: f64| -> f64 {
        (0..5)
            .map(|seed| {
                let mut s = init_network(config(2, 2, rate, seed)).unwrap();
                while !s.is_done() {
                    s.advance(&fixed_time_actions(&s));
                }
                s.metrics().aql
            })
            .sum::<f64>()
    };
    assert!(aql(0.2) >= aql(0.1));
}
