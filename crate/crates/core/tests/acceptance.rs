//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,2,7` runs a subset.

use std::collections::BTreeSet;
use std::fs;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use trafficpref::caption::{parse_caption, render_caption, CaptionFields};
use trafficpref::harness::{run_ablation, run_pipeline, AblationOutcome, CellManifest, ExperimentSpec, Matrix, Workspace};
use trafficpref::judge::{build_pref_dataset, CongestionScale, LabeledPair, Margins, NoisyJudge, Profile, SyntheticJudge, UtilityJudge};
use trafficpref::pairs::{collect_pool, sample_pairs, sampler_rng, CollectConfig, PairingConfig, PoolRecord, PoolStats};
use trafficpref::ppo::gae;
use trafficpref::reward_model::{evaluate_offline, loss_and_gradient, Encoder, FeatureMode, FieldMask, Hyper, PairFeatures, Scorer, ScorerKind, TrainConfig, train_reward_model};
use trafficpref::rng::Rng;
use trafficpref::shaping::{mask_predicate, ShapingConfig, StreamNormalizer};
use trafficpref::sim::{self, init_network, Movement, Observation, Phase, PhaseState, SignalStage, SimConfig, Side};
use trafficpref::stats;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn random_fields(rng: &mut Rng) -> CaptionFields {
    let r1 = |x: f64| (x * 10.0).round() / 10.0;
    let r2 = |x: f64| (x * 100.0).round() / 100.0;
    let ttc_p10 = r2(rng.random_range(0.0..10.0));
    CaptionFields {
        phase: Phase::ALL[rng.random_range(0..4)],
        elapsed: rng.random_range(0..60),
        q: std::array::from_fn(|_| rng.random_range(0..20)),
        p: std::array::from_fn(|_| rng.random_range(-8..20)),
        delay: r1(rng.random_range(0.0..120.0)),
        thru: rng.random_range(0..15),
        ttc_p10,
        ttc_p50: r2(rng.random_range(ttc_p10..=10.0)),
        brakes: rng.random_range(0..6),
        red_risk: rng.random_bool(0.2),
        near_v: r2(rng.random_range(0.0..15.0)),
        near_a: r2(rng.random_range(-6.0..3.0)),
        near_d: r1(rng.random_range(0.0..150.0)),
    }
}

fn random_observation(rng: &mut Rng) -> Observation {
    let ttc_p10 = rng.random_range(0.0..10.0);
    Observation {
        intersection_id: rng.random_range(0..9),
        time: rng.random_range(0.0..3600.0),
        phase: PhaseState {
            phase_id: Phase::ALL[rng.random_range(0..4)],
            signal_stage: [SignalStage::Green, SignalStage::Yellow, SignalStage::Allred][rng.random_range(0..3)],
            elapsed: rng.random_range(0.0..90.0),
        },
        q: std::array::from_fn(|_| rng.random_range(0..25)),
        p: std::array::from_fn(|_| rng.random_range(-20..25)),
        mean_delay: rng.random_range(0.0..300.0),
        throughput: rng.random_range(0..20),
        ttc_p10,
        ttc_p50: rng.random_range(ttc_p10..=10.0),
        h_brake: rng.random_range(0..8),
        rho_red: rng.random_bool(0.3),
        v_near: rng.random_range(0.0..16.0),
        a_near: rng.random_range(-7.0..3.0),
        d_stop: rng.random_range(0.0..150.0),
    }
}

/// Central-difference check of the Bradley-Terry gradient.
fn c1_gradient() -> Verdict {
    let mut rng = Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let mode = FeatureMode::ALL[draw % 4];
        let kind = if draw % 5 == 4 { ScorerKind::Linear } else { ScorerKind::Mlp };
        let fields: Vec<CaptionFields> = (0..24).map(|_| random_fields(&mut rng)).collect();
        let mask = FieldMask {
            risk: draw % 7 == 3,
            congestion: false,
        };
        let enc = Encoder::fit(mode, mask, &fields);
        let mut scorer = Scorer::init(kind, enc.dim(), 8, &mut rng);
        for t in &mut scorer.theta {
            *t += rng.random_range(-0.3..0.3);
        }
        let batch: Vec<PairFeatures> = (0..8)
            .map(|k| PairFeatures {
                f1: enc.encode(&fields[2 * k]),
                f2: enc.encode(&fields[2 * k + 1]),
                y: rng.random_range(1..=2),
                w: rng.random_range(0.2..2.0),
            })
            .collect();
        let reference: Vec<Vec<f64>> = fields[16..].iter().map(|f| enc.encode(f)).collect();
        let hyper = Hyper {
            tau_bt: rng.random_range(0.5..2.0),
            eta: 1e-3,
            zeta: 0.1,
        };
        let (_, grad) = loss_and_gradient(&scorer, &batch, &reference, &hyper).unwrap();
        let mut fd = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let h = 1e-5 * scorer.theta[i].abs().max(1.0);
            let mut plus = scorer.clone();
            plus.theta[i] += h;
            let mut minus = scorer.clone();
            minus.theta[i] -= h;
            let lp = loss_and_gradient(&plus, &batch, &reference, &hyper).unwrap().0.total();
            let lm = loss_and_gradient(&minus, &batch, &reference, &hyper).unwrap().0.total();
            fd[i] = (lp - lm) / (2.0 * h);
        }
        let scale = grad.iter().chain(&fd).fold(0.0f64, |m, g| m.max(g.abs()));
        let err = grad.iter().zip(&fd).fold(0.0f64, |m, (g, f)| m.max((g - f).abs()));
        worst = worst.max(err / scale);
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 100 draws (< 1e-4)"))
}

/// `A_t = Σ_l (γλ)^l δ_{t+l}`, summed term by term up to the first done.
fn gae_brute(r: &[f64], v: &[f64], done: &[bool], boot: f64, gamma: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let value = |k: usize| if k < n { v[k] } else { boot };
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            for k in t..n {
                let next = if done[k] { 0.0 } else { gamma * value(k + 1) };
                a += (gamma * lam).powi((k - t) as i32) * (r[k] + next - v[k]);
                if done[k] {
                    break;
                }
            }
            a
        })
        .collect()
}

fn c2_gae() -> Verdict {
    let mut rng = Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let done: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
        let boot = rng.random_range(-5.0..5.0);
        let gamma = rng.random_range(0.8..1.0);
        let lam = rng.random_range(0.5..1.0);
        let (adv, ret) = gae(&r, &v, &done, boot, gamma, lam);
        for ((a, b), (rt, vt)) in adv.iter().zip(gae_brute(&r, &v, &done, boot, gamma, lam)).zip(ret.iter().zip(&v)) {
            worst = worst.max((a - b).abs()).max((rt - (b + vt)).abs());
        }
    }
    verdict(worst < 1e-10, format!("max abs error {worst:.2e} over 1000 episodes (< 1e-10)"))
}

fn c3_mask() -> Verdict {
    let cfg = ShapingConfig::default();
    let mut rows = 0;
    let mut ok = true;
    for ttc_ok in [false, true] {
        for accel_ok in [false, true] {
            for red_ok in [false, true] {
                let ttc = if ttc_ok { cfg.tau_ttc } else { cfg.tau_ttc - 0.3 };
                let a = if accel_ok { -cfg.a_max_mask } else { -cfg.a_max_mask - 0.5 };
                let got = mask_predicate(ttc, a, !red_ok, &cfg);
                ok &= got == (ttc_ok && accel_ok && red_ok);
                rows += 1;
            }
        }
    }
    verdict(ok && rows == 8, format!("{rows} combinations, only all-pass unmasks: {ok}"))
}

fn single_junction() -> sim::SimState {
    init_network(SimConfig {
        grid_rows: 1,
        grid_cols: 1,
        arrival_rate_per_entry: 0.0,
        ..SimConfig::default()
    })
    .unwrap()
}

fn c4_pressure_and_protocol() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    // (vehicles on (incoming side, movement), vehicles on outgoing side, hand-counted reward)
    type Scene = (Vec<(Side, Movement, usize)>, Vec<(Side, usize)>, f64);
    let scenes: [Scene; 3] = [
        (vec![], vec![], 0.0),
        (vec![(Side::N, Movement::Straight, 2), (Side::N, Movement::Left, 1), (Side::E, Movement::Straight, 1)], vec![(Side::S, 1)], -3.0),
        (vec![(Side::N, Movement::Straight, 1), (Side::S, Movement::Left, 2), (Side::W, Movement::Straight, 1)], vec![(Side::E, 3)], -1.0),
    ];
    for (k, (incoming, outgoing, want)) in scenes.iter().enumerate() {
        let mut s = single_junction();
        let j = s.network.junctions[0].clone();
        for &(side, m, n) in incoming {
            let lane = s.lane_of(j.incoming[side.index()], Some(m)).unwrap();
            for i in 0..n {
                s.place_vehicle(lane, 60.0 - 10.0 * i as f64, 0.0).unwrap();
            }
        }
        for &(side, n) in outgoing {
            let lane = s.lane_of(j.outgoing[side.index()], None).unwrap();
            for i in 0..n {
                s.place_vehicle(lane, 40.0 - 10.0 * i as f64, 0.0).unwrap();
            }
        }
        let got = sim::pressure_reward(&s.observe(0));
        ok &= got == *want;
        notes.push(format!("scene {} {got} (want {want})", k + 1));
    }

    let mut s = single_junction();
    for _ in 0..30 {
        s.advance(&[Phase::EwStraight]);
    }
    let mut trace = Vec::new();
    for _ in 0..35 {
        s.advance(&[Phase::NsStraight]);
        let ps = s.phase_state(0);
        trace.push((ps.phase_id, ps.signal_stage, ps.elapsed));
    }
    let (ew, ns) = (Phase::EwStraight, Phase::NsStraight);
    let mut want = vec![
        (ew, SignalStage::Yellow, 1.0),
        (ew, SignalStage::Yellow, 2.0),
        (ew, SignalStage::Allred, 0.0),
        (ew, SignalStage::Allred, 1.0),
        (ns, SignalStage::Green, 0.0),
    ];
    want.extend((1..=30).map(|k| (ns, SignalStage::Green, f64::from(k))));
    let protocol = trace == want && s.at_decision_point(0);
    ok &= protocol;
    notes.push(format!("30/3/2 trace matches: {protocol}"));
    verdict(ok, notes.join("; "))
}

fn c5_normalizer() -> Verdict {
    let cfg = ShapingConfig {
        clip_c: f64::MAX,
        ..ShapingConfig::default()
    };
    let mut rng = Rng::seed_from_u64(5);
    let normal = Normal::new(3.0, 2.0).unwrap();
    let mut norm = StreamNormalizer::default();
    let mut out = Vec::with_capacity(10_000);
    let mut constant = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let x = normal.sample(&mut rng);
        let n = norm.update_and_normalize([x, 4.2, x], &cfg);
        out.push(n.values[0]);
        constant.push(n.values[1]);
    }
    let mean = stats::mean(&out);
    let var = out.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / out.len() as f64;
    let const_zero = constant.iter().all(|&z| z == 0.0);
    verdict(
        mean.abs() <= 0.05 && (var - 1.0).abs() <= 0.05 && const_zero,
        format!("mean {mean:.4}, variance {var:.4}, constant stream all zero: {const_zero}"),
    )
}

fn c6_determinism() -> Verdict {
    let spec = ExperimentSpec {
        name: "det".into(),
        seeds: vec![7],
        ..ExperimentSpec::default()
    };
    let run = || -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let out = run_pipeline(&ws, &spec, 1).unwrap();
        assert_eq!(out.failures(), 0, "{:?}", out.cells[0].result);
        fs::read(ws.run_dir("det", 7).join("metrics.csv")).unwrap()
    };
    let (a, b) = (run(), run());
    verdict(a == b && !a.is_empty(), format!("two full pipeline runs, metrics.csv {} bytes each, identical: {}", a.len(), a == b))
}

fn c7_captions() -> Verdict {
    let mut rng = Rng::seed_from_u64(7);
    let mut bad = 0;
    for _ in 0..10_000 {
        let obs = random_observation(&mut rng);
        let c = render_caption(&obs);
        let again = render_caption(&obs);
        let fields = CaptionFields::from_observation(&obs);
        let exact = match parse_caption(&c.text) {
            Ok(f) => f == fields && f.render() == c.text,
            Err(_) => false,
        };
        if c != again || !exact {
            bad += 1;
        }
    }
    verdict(bad == 0, format!("{bad} of 10000 observations failed determinism or round trip"))
}

fn utility(f: &CaptionFields) -> f64 {
    let q: f64 = f.q.iter().map(|&q| f64::from(q).powi(2) / 8.0).sum();
    -q - 0.05 * f.delay + f.ttc_p10.min(4.0) - 2.0 * f64::from(u8::from(f.red_risk)) - 0.3 * f64::from(f.brakes)
}

fn offline_pool(episodes: u32, seed: u64) -> Vec<PoolRecord> {
    let scen = SimConfig {
        arrival_rate_per_entry: 0.12,
        ..SimConfig::default()
    };
    collect_pool(&scen, &CollectConfig { episodes, ..CollectConfig::default() }, seed).unwrap()
}

fn heldout(records: &[LabeledPair], idx: &[usize]) -> Vec<LabeledPair> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

fn c8_utility_oracle() -> Verdict {
    let pool = offline_pool(10, 1);
    let modes = [FeatureMode::StructuredFusion, FeatureMode::NumericOnly, FeatureMode::ShuffledNoUnits];
    let mut acc = [0.0; 3];
    let seeds = [1u64, 2, 3];
    for &seed in &seeds {
        let sampled = sample_pairs(&pool, 2000, &PairingConfig::default(), &mut sampler_rng(seed)).unwrap();
        let mut judge = UtilityJudge { utility, margin: 0.05 };
        let (records, _) = build_pref_dataset(&pool, &sampled, &mut judge).unwrap();
        for (k, &mode) in modes.iter().enumerate() {
            let out = train_reward_model(&records, &TrainConfig { mode, ..TrainConfig::default() }, seed).unwrap();
            acc[k] += evaluate_offline(&out.model, &heldout(&records, &out.heldout_idx), None).unwrap().pairwise_accuracy / seeds.len() as f64;
        }
    }
    let [fusion, numeric, shuffled] = acc;
    verdict(
        fusion >= 0.9 && fusion - numeric >= 0.03 && shuffled < fusion,
        format!("held-out accuracy: structured_fusion {fusion:.4} (>= 0.9), numeric_only {numeric:.4} (gap >= 0.03), shuffled_no_units {shuffled:.4} (< fusion)"),
    )
}

struct Offline {
    pool: Vec<PoolRecord>,
    eval: Vec<LabeledPair>,
    scale: CongestionScale,
}

fn offline_setup() -> Offline {
    let pool = offline_pool(10, 1);
    let eval_pool = offline_pool(6, 99);
    let scale = CongestionScale::from_stats(&PoolStats::from_pool(&pool));
    let sampled = sample_pairs(&eval_pool, 2000, &PairingConfig::default(), &mut sampler_rng(99)).unwrap();
    let (eval, _) = build_pref_dataset(&eval_pool, &sampled, &mut SyntheticJudge::new(Profile::Balanced, Margins::default(), scale)).unwrap();
    Offline { pool, eval, scale }
}

fn accuracy_at(o: &Offline, m: usize, seed: u64, noise: Option<(f64, f64)>) -> f64 {
    let sampled = sample_pairs(&o.pool, m, &PairingConfig::default(), &mut sampler_rng(seed)).unwrap();
    let clean = SyntheticJudge::new(Profile::Balanced, Margins::default(), o.scale);
    let (records, _) = match noise {
        None => build_pref_dataset(&o.pool, &sampled, &mut clean.clone()),
        Some((flip, abstain)) => build_pref_dataset(&o.pool, &sampled, &mut NoisyJudge::new(clean, flip, abstain, seed).unwrap()),
    }
    .unwrap();
    let out = train_reward_model(&records, &TrainConfig::default(), seed).unwrap();
    evaluate_offline(&out.model, &o.eval, None).unwrap().pairwise_accuracy
}

fn c9_budget(o: &Offline) -> Verdict {
    let seeds = 1u64..=5;
    let mean_at = |m: usize| stats::mean(&seeds.clone().map(|s| accuracy_at(o, m, s, None)).collect::<Vec<_>>());
    let (a100, a1000, a4000) = (mean_at(100), mean_at(1000), mean_at(4000));
    verdict(
        (a1000 - a4000).abs() <= 0.02 && a1000.min(a4000) - a100 >= 0.03,
        format!("mean accuracy over 5 seeds on 2000 common pairs: M=100 {a100:.4}, M=1000 {a1000:.4}, M=4000 {a4000:.4}"),
    )
}

fn c10_noise(o: &Offline) -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 1u64..=3 {
        let a = [accuracy_at(o, 2000, seed, None), accuracy_at(o, 2000, seed, Some((0.05, 0.0))), accuracy_at(o, 2000, seed, Some((0.15, 0.05)))];
        ok &= a[0] >= a[1] && a[1] >= a[2];
        lines.push(format!("seed {seed}: {:.4} >= {:.4} >= {:.4}", a[0], a[1], a[2]));
    }
    verdict(ok, lines.join("; "))
}

/// Per-seed values of one metric for the cells whose name ends in `suffix`.
fn per_seed(o: &AblationOutcome, suffix: &str, f: fn(&CellManifest) -> f64) -> Vec<(u64, f64)> {
    let mut v: Vec<(u64, f64)> = o
        .cells
        .iter()
        .filter(|c| c.variant.ends_with(suffix))
        .map(|c| (c.seed, c.result.as_ref().map(f).unwrap_or(f64::NAN)))
        .collect();
    v.sort_by_key(|p| p.0);
    v
}

fn att(m: &CellManifest) -> f64 {
    m.metrics.as_ref().and_then(|x| x.att).unwrap_or(f64::NAN)
}

fn ttc(m: &CellManifest) -> f64 {
    m.metrics.as_ref().map_or(f64::NAN, |x| x.ttc_p10)
}

/// Seeds on which `better(a, b)` holds, over the seeds both lists share.
fn wins(a: &[(u64, f64)], b: &[(u64, f64)], better: fn(f64, f64) -> bool) -> (usize, usize) {
    let n = a.len().min(b.len());
    (a.iter().zip(b).filter(|(x, y)| better(x.1, y.1)).count(), n)
}

struct RlSuite {
    ws: Workspace,
    _dir: tempfile::TempDir,
    workers: usize,
}

impl RlSuite {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        Self {
            ws: Workspace::new(dir.path()),
            _dir: dir,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }

    fn run(&self, m: Matrix, seeds: u64) -> AblationOutcome {
        let base = ExperimentSpec {
            name: "rl".into(),
            seeds: (1..=seeds).collect(),
            ..ExperimentSpec::default()
        };
        let out = run_ablation(&self.ws, m, &base, self.workers).unwrap();
        for c in &out.cells {
            if let Err(e) = &c.result {
                eprintln!("  {} seed {}: {e}", c.variant, c.seed);
            }
        }
        out
    }

    /// Directional check at 5 seeds; on failure, 10 seeds and a one-sided
    /// sign test at p < 0.1.
    fn directional(&self, m: Matrix, check: &dyn Fn(&AblationOutcome) -> Vec<(String, usize, usize, bool)>) -> Verdict {
        let first = check(&self.run(m, 5));
        let describe = |r: &[(String, usize, usize, bool)]| r.iter().map(|(name, k, n, _)| format!("{name} {k}/{n}")).collect::<Vec<_>>().join(", ");
        if first.iter().all(|r| r.3) {
            return verdict(true, format!("5 seeds: {}", describe(&first)));
        }
        let second = check(&self.run(m, 10));
        let signed: Vec<(String, usize, usize, f64)> = second.iter().map(|(name, k, n, _)| (name.clone(), *k, *n, stats::sign_test_p(*k, *n))).collect();
        let pass = signed.iter().all(|r| r.3 < 0.1);
        let detail = signed.iter().map(|(name, k, n, p)| format!("{name} {k}/{n} p={p:.3}")).collect::<Vec<_>>().join(", ");
        verdict(pass, format!("5 seeds: {}; 10-seed sign test: {detail}", describe(&first)))
    }
}

fn c11_composition(rl: &RlSuite) -> Verdict {
    rl.directional(Matrix::A1, &|o| {
        let (w1, n1) = wins(&per_seed(o, "-full", att), &per_seed(o, "-external_only", att), |a, b| a < b);
        let (w2, n2) = wins(&per_seed(o, "-no_mask", ttc), &per_seed(o, "-full", ttc), |a, b| a <= b);
        let need = |n: usize| (4 * n).div_ceil(5);
        vec![
            ("full ATT < external_only".into(), w1, n1, w1 >= need(n1)),
            ("no_mask TTC p10 <= full".into(), w2, n2, w2 >= need(n2)),
        ]
    })
}

fn c12_profiles(rl: &RlSuite) -> Verdict {
    rl.directional(Matrix::B1, &|o| {
        let (w1, n1) = wins(&per_seed(o, "-safety_focused", ttc), &per_seed(o, "-efficiency_focused", ttc), |a, b| a > b);
        let (w2, n2) = wins(&per_seed(o, "-safety_focused", att), &per_seed(o, "-efficiency_focused", att), |a, b| a > b);
        vec![
            ("safety TTC p10 > efficiency".into(), w1, n1, 2 * w1 > n1),
            ("safety ATT > efficiency".into(), w2, n2, 2 * w2 > n2),
        ]
    })
}

fn c13_normalization(rl: &RlSuite) -> Verdict {
    let variance = |o: &AblationOutcome, suffix: &str| {
        let v: Vec<f64> = per_seed(o, suffix, att).into_iter().map(|p| p.1).collect();
        let m = stats::mean(&v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    let o = rl.run(Matrix::A3, 5);
    let (d, nn) = (variance(&o, "-default"), variance(&o, "-no_norm"));
    if nn > d {
        return verdict(true, format!("5 seeds: ATT variance no_norm {nn:.3} > default {d:.3}"));
    }
    let o = rl.run(Matrix::A3, 10);
    let (d10, nn10) = (variance(&o, "-default"), variance(&o, "-no_norm"));
    verdict(nn10 > d10, format!("5 seeds: no_norm {nn:.3} vs default {d:.3}; 10 seeds: no_norm {nn10:.3} vs default {d10:.3}"))
}

fn c14_sensitivity(rl: &RlSuite) -> Verdict {
    let o = rl.run(Matrix::D2, 5);
    match &o.d2 {
        Some(g) => {
            let cells = g.cells.iter().map(|(l, t, a)| format!("{l}/{t}:{a:.2}")).collect::<Vec<_>>().join(" ");
            verdict(g.spread < 0.15, format!("relative ATT spread {:.4} (< 0.15) over λ_max/τ_ttc {cells}", g.spread))
        }
        None => verdict(false, "no grid produced"),
    }
}

fn main() {
    // Under `cargo test` filters and libtest flags arrive as arguments; a
    // filter that does not name this suite skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));

    let mut offline: Option<Offline> = None;
    let rl = RlSuite::new();
    let mut failed = Vec::new();
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let v = f();
        println!("criterion {n:>2} {} {name}: {} [{:.1}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail, t.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(n);
        }
    };
    report(1, "Bradley-Terry gradient", &mut c1_gradient);
    report(2, "GAE against brute force", &mut c2_gae);
    report(3, "safety mask truth table", &mut c3_mask);
    report(4, "pressure fixtures and signal protocol", &mut c4_pressure_and_protocol);
    report(5, "stream normalizer", &mut c5_normalizer);
    report(6, "pipeline determinism", &mut c6_determinism);
    report(7, "caption determinism and round trip", &mut c7_captions);
    report(8, "known-utility caption structure", &mut c8_utility_oracle);
    report(9, "pair budget saturation", &mut || c9_budget(offline.get_or_insert_with(offline_setup)));
    report(10, "judge noise monotonicity", &mut || c10_noise(offline.get_or_insert_with(offline_setup)));
    report(11, "reward composition", &mut || c11_composition(&rl));
    report(12, "judge profile trade-off", &mut || c12_profiles(&rl));
    report(13, "normalization stabilises ATT", &mut || c13_normalization(&rl));
    report(14, "λ_max × τ_ttc sensitivity", &mut || c14_sensitivity(&rl));
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
