//! Observation pool collection and contrast-weighted pair sampling.
//!
//! A pair `(a, b)` has unnormalised weight
//! `α·Δcong + β·Δsafety + γ·1{same junction, |t_a - t_b| ∈ [δ1, δ2]}` where the
//! contrasts are absolute gaps of pool z-scores. Pairs are drawn exactly in
//! proportion to that weight, without replacement.

use std::collections::HashSet;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{render_caption, Caption};
use crate::jsonl::{self, JsonlError};
use crate::rng::{self, streams, Rng};
use crate::sim::{self, ConfigError, Observation, Phase, SimConfig};

const STD_FLOOR: f64 = 1e-8;
/// Pools with at most this many unordered pairs are sampled by enumeration.
const ENUMERATION_LIMIT: usize = 200_000;
/// Rejection attempts allowed per requested pair before declaring exhaustion.
const ATTEMPTS_PER_PAIR: usize = 20_000;

/// One Stage-1 buffer entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub episode: u32,
    pub observation: Observation,
    pub caption: Caption,
}

pub fn parse_pool(text: &str) -> Result<Vec<PoolRecord>, JsonlError> {
    jsonl::parse(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    /// Difference of two values in z-units; the std is floored away from zero.
    pub fn z_gap(&self, a: f64, b: f64) -> f64 {
        (a - b) / self.std.max(STD_FLOOR)
    }
}

/// Standardisation statistics of the pool, computed once before sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub queue: Moments,
    pub delay: Moments,
    pub ttc_p10: Moments,
    pub ttc_p50: Moments,
    pub h_brake: Moments,
}

impl PoolStats {
    pub fn from_observations<'a>(obs: impl Iterator<Item = &'a Observation> + Clone) -> Self {
        Self {
            queue: Moments::of(obs.clone().map(Observation::mean_queue)),
            delay: Moments::of(obs.clone().map(|o| o.mean_delay)),
            ttc_p10: Moments::of(obs.clone().map(|o| o.ttc_p10)),
            ttc_p50: Moments::of(obs.clone().map(|o| o.ttc_p50)),
            h_brake: Moments::of(obs.map(|o| f64::from(o.h_brake))),
        }
    }

    pub fn from_pool(pool: &[PoolRecord]) -> Self {
        Self::from_observations(pool.iter().map(|r| &r.observation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_pair: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma_pair: 1.0,
            delta1: 10.0,
            delta2: 120.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PairError {
    #[error("invalid pairing config: {0}")]
    Config(String),
    #[error("pool has {0} entries, need at least 2")]
    PoolTooSmall(usize),
    #[error("pair budget must be at least 1")]
    ZeroBudget,
}

impl PairingConfig {
    pub fn validate(&self) -> Result<(), PairError> {
        let w = [self.alpha, self.beta, self.gamma_pair];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(PairError::Config("weights must be finite and >= 0".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(PairError::Config("weights must not all be zero".into()));
        }
        if !(self.delta1.is_finite() && self.delta2.is_finite() && self.delta1 < self.delta2) {
            return Err(PairError::Config("need delta1 < delta2".into()));
        }
        Ok(())
    }
}

pub fn congestion_contrast(a: &Observation, b: &Observation, stats: &PoolStats) -> f64 {
    stats.queue.z_gap(a.mean_queue(), b.mean_queue()).abs() + stats.delay.z_gap(a.mean_delay, b.mean_delay).abs()
}

pub fn safety_contrast(a: &Observation, b: &Observation, stats: &PoolStats) -> f64 {
    stats.ttc_p10.z_gap(a.ttc_p10, b.ttc_p10).abs()
        + stats.ttc_p50.z_gap(a.ttc_p50, b.ttc_p50).abs()
        + stats.h_brake.z_gap(f64::from(a.h_brake), f64::from(b.h_brake)).abs()
}

fn time_shift_indicator(a: &PoolRecord, b: &PoolRecord, cfg: &PairingConfig) -> bool {
    let dt = (a.observation.time - b.observation.time).abs();
    a.episode == b.episode && a.observation.intersection_id == b.observation.intersection_id && dt >= cfg.delta1 && dt <= cfg.delta2
}

pub fn pair_weight_unnorm(a: &PoolRecord, b: &PoolRecord, cfg: &PairingConfig, stats: &PoolStats) -> f64 {
    let (oa, ob) = (&a.observation, &b.observation);
    cfg.alpha * congestion_contrast(oa, ob, stats)
        + cfg.beta * safety_contrast(oa, ob, stats)
        + if time_shift_indicator(a, b, cfg) { cfg.gamma_pair } else { 0.0 }
}

/// A sampled pair of pool indices, in presentation order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPairs {
    pub pairs: Vec<CandidatePair>,
    /// Fewer positive-weight pairs were available than requested.
    pub exhausted: bool,
}

fn weight_bound(pool: &[PoolRecord], cfg: &PairingConfig, stats: &PoolStats) -> f64 {
    let range = |f: &dyn Fn(&Observation) -> f64, m: &Moments| {
        let (lo, hi) = pool
            .iter()
            .map(|r| f(&r.observation))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        (hi - lo) / m.std.max(STD_FLOOR)
    };
    let cong = range(&Observation::mean_queue, &stats.queue) + range(&|o| o.mean_delay, &stats.delay);
    let safety = range(&|o| o.ttc_p10, &stats.ttc_p10)
        + range(&|o| o.ttc_p50, &stats.ttc_p50)
        + range(&|o| f64::from(o.h_brake), &stats.h_brake);
    cfg.alpha * cong + cfg.beta * safety + cfg.gamma_pair
}

/// Draw up to `m` distinct unordered pairs with probability proportional to
/// their weight. Presentation order within a pair is a fair coin flip.
pub fn sample_pairs(pool: &[PoolRecord], m: usize, cfg: &PairingConfig, rng: &mut Rng) -> Result<SampledPairs, PairError> {
    cfg.validate()?;
    if pool.len() < 2 {
        return Err(PairError::PoolTooSmall(pool.len()));
    }
    if m == 0 {
        return Err(PairError::ZeroBudget);
    }
    let stats = PoolStats::from_pool(pool);
    let n = pool.len();
    let total_pairs = n * (n - 1) / 2;
    let mut out = if total_pairs <= ENUMERATION_LIMIT {
        sample_enumerated(pool, m, cfg, &stats, rng)
    } else {
        sample_rejection(pool, m, cfg, &stats, rng)
    };
    for p in &mut out.pairs {
        if rng.random::<bool>() {
            std::mem::swap(&mut p.a, &mut p.b);
        }
    }
    Ok(out)
}

fn sample_enumerated(pool: &[PoolRecord], m: usize, cfg: &PairingConfig, stats: &PoolStats, rng: &mut Rng) -> SampledPairs {
    let n = pool.len();
    let mut cands: Vec<CandidatePair> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let w = pair_weight_unnorm(&pool[a], &pool[b], cfg, stats);
            if w > 0.0 {
                cands.push(CandidatePair { a, b, weight: w });
            }
        }
    }
    let exhausted = cands.len() < m;
    let mut total: f64 = cands.iter().map(|c| c.weight).sum();
    let mut pairs = Vec::with_capacity(m.min(cands.len()));
    while pairs.len() < m && !cands.is_empty() {
        let mut u = rng.random::<f64>() * total;
        let mut k = cands.len() - 1;
        for (i, c) in cands.iter().enumerate() {
            if u < c.weight {
                k = i;
                break;
            }
            u -= c.weight;
        }
        let c = cands.swap_remove(k);
        total -= c.weight;
        if total <= 0.0 {
            total = cands.iter().map(|c| c.weight).sum();
        }
        pairs.push(c);
    }
    SampledPairs { pairs, exhausted }
}

fn sample_rejection(pool: &[PoolRecord], m: usize, cfg: &PairingConfig, stats: &PoolStats, rng: &mut Rng) -> SampledPairs {
    let n = pool.len();
    let bound = weight_bound(pool, cfg, stats);
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs = Vec::with_capacity(m);
    let budget = ATTEMPTS_PER_PAIR.saturating_mul(m);
    let mut attempts = 0usize;
    while pairs.len() < m && attempts < budget {
        attempts += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n - 1);
        let b = if b >= a { b + 1 } else { b };
        let key = (a.min(b), a.max(b));
        if seen.contains(&key) {
            continue;
        }
        let w = pair_weight_unnorm(&pool[key.0], &pool[key.1], cfg, stats);
        if w > 0.0 && rng.random::<f64>() * bound < w {
            seen.insert(key);
            pairs.push(CandidatePair {
                a: key.0,
                b: key.1,
                weight: w,
            });
        }
    }
    let exhausted = pairs.len() < m;
    SampledPairs { pairs, exhausted }
}

/// How Stage-1 rollouts pick phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviourPolicy {
    FixedTime,
    /// Uniformly random phase at every decision point.
    Random,
    /// Alternate fixed-time and random episodes.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub episodes: u32,
    /// Seconds between pool samples.
    pub sample_every_s: f64,
    /// Samples before this time are skipped.
    pub warmup_s: f64,
    pub behaviour: BehaviourPolicy,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            episodes: 8,
            sample_every_s: 5.0,
            warmup_s: 30.0,
            behaviour: BehaviourPolicy::Mixed,
        }
    }
}

/// Roll out the behaviour policy and caption sampled observations.
pub fn collect_pool(scenario: &SimConfig, collect: &CollectConfig, seed: u64) -> Result<Vec<PoolRecord>, ConfigError> {
    let mut policy_rng = rng::stream(seed, streams::COLLECT_POLICY);
    let every = ((collect.sample_every_s / scenario.dt).round() as u32).max(1);
    let mut pool = Vec::new();
    for episode in 0..collect.episodes {
        let config = SimConfig {
            seed: rng::derive_seed(seed, u64::from(episode)),
            ..scenario.clone()
        };
        let random = match collect.behaviour {
            BehaviourPolicy::FixedTime => false,
            BehaviourPolicy::Random => true,
            BehaviourPolicy::Mixed => episode % 2 == 1,
        };
        let mut state = sim::init_network(config)?;
        let mut tick = 0u32;
        while !state.is_done() {
            let actions: Vec<Phase> = if random {
                (0..state.num_junctions()).map(|_| Phase::ALL[policy_rng.random_range(0..4)]).collect()
            } else {
                sim::fixed_time_actions(&state)
            };
            state.advance(&actions);
            tick += 1;
            if tick % every == 0 && state.time() >= collect.warmup_s {
                for j in 0..state.num_junctions() {
                    let observation = state.observe(j);
                    let caption = render_caption(&observation);
                    pool.push(PoolRecord {
                        episode,
                        observation,
                        caption,
                    });
                }
            }
        }
    }
    Ok(pool)
}

/// Deterministic sampler RNG for a run seed.
pub fn sampler_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(rng::derive_seed(seed, streams::PAIR_SAMPLER))
}
