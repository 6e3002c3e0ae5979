//! Shared-policy PPO with GAE for the signal controllers.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::CaptionFields;
use crate::reward_model::Scoring;
use crate::rng::{self, streams, Rng};
use crate::shaping::{lambda_schedule, mixed_streams, safety_mask, ShapingConfig, ShapingError, StreamNormalizer};
use crate::sim::{self, average_metrics, external_reward_tl, ConfigError, EpisodeMetrics, Observation, Phase, SimConfig};

pub const POLICY_FORMAT: &str = "policy-v1";
pub const FEATURE_DIM: usize = 13;
pub const NUM_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub lr: f64,
    pub buffer: usize,
    pub sample: usize,
    pub hidden: usize,
    pub clip: f64,
    pub batch: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub gamma_discount: f64,
    pub iterations: u32,
    pub episodes: u32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            buffer: 12_000,
            sample: 3_000,
            hidden: 20,
            clip: 0.2,
            batch: 128,
            minibatches: 16,
            entropy_coef: 1e-3,
            gae_lambda: 0.95,
            gamma_discount: 0.99,
            iterations: 40,
            episodes: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid ppo config: {0}")]
    Config(String),
    #[error("feature dimension {found}, network expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite ppo loss (policy {policy_loss}, value {value_loss}, max |A| {max_adv}); update aborted")]
    NonFinite { policy_loss: f64, value_loss: f64, max_adv: f64 },
    #[error("intrinsic reward requested without a scorer")]
    MissingScorer,
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Sim(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let pos = [self.buffer, self.sample, self.hidden, self.batch, self.minibatches];
        if pos.contains(&0) || !(self.lr >= 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(PpoError::Config("sizes must be positive".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(PpoError::Config(format!("clip {}", self.clip)));
        }
        if !(self.gamma_discount > 0.0 && self.gamma_discount <= 1.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(PpoError::Config("gamma in (0,1], lambda in [0,1]".into()));
        }
        Ok(())
    }
}

/// Policy input: 8 scaled numerics, phase one-hot, elapsed green fraction.
pub fn policy_features(obs: &Observation, green_s: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(FEATURE_DIM);
    x.extend(obs.p.iter().map(|&p| f64::from(p) / 4.0));
    x.push((obs.mean_delay - 20.0) / 20.0);
    x.push((obs.ttc_p10 - 5.0) / 3.0);
    x.push((obs.ttc_p50 - 5.0) / 3.0);
    x.push((f64::from(obs.h_brake) - 0.5) / 2.0);
    for ph in Phase::ALL {
        x.push(if ph == obs.phase.phase_id { 1.0 } else { 0.0 });
    }
    x.push(obs.phase.elapsed / green_s);
    x
}

/// One-hidden-layer tanh network, parameters flat: `w1 | b1 | w2 | b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MlpTensors {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            inputs,
            hidden,
            outputs,
            theta: vec![0.0; hidden * inputs + hidden + outputs * hidden + outputs],
        }
    }

    pub fn init(inputs: usize, hidden: usize, outputs: usize, out_scale: f64, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(inputs, hidden, outputs);
        let a = 1.0 / (inputs as f64).sqrt();
        let b = out_scale / (hidden as f64).sqrt();
        let split = hidden * inputs + hidden;
        for (i, t) in m.theta.iter_mut().enumerate() {
            *t = if i < split { rng.random_range(-a..a) } else { rng.random_range(-b..b) };
        }
        m
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.inputs;
        (w1, w1 + self.hidden, w1 + self.hidden + self.outputs * self.hidden)
    }

    pub fn forward(&self, x: &[f64], h: &mut Vec<f64>) -> Vec<f64> {
        let (o_b1, o_w2, o_b2) = self.offsets();
        h.clear();
        for k in 0..self.hidden {
            let row = &self.theta[k * self.inputs..(k + 1) * self.inputs];
            let a: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.theta[o_b1 + k];
            h.push(a.tanh());
        }
        (0..self.outputs)
            .map(|o| {
                let row = &self.theta[o_w2 + o * self.hidden..o_w2 + (o + 1) * self.hidden];
                row.iter().zip(h.iter()).map(|(w, v)| w * v).sum::<f64>() + self.theta[o_b2 + o]
            })
            .collect()
    }

    /// Accumulate `Σ_o g[o]·∂out_o/∂θ` into `grad`.
    pub fn backward(&self, x: &[f64], h: &[f64], g: &[f64], grad: &mut [f64]) {
        let (o_b1, o_w2, o_b2) = self.offsets();
        let mut dh = vec![0.0; self.hidden];
        for o in 0..self.outputs {
            grad[o_b2 + o] += g[o];
            for k in 0..self.hidden {
                grad[o_w2 + o * self.hidden + k] += g[o] * h[k];
                dh[k] += g[o] * self.theta[o_w2 + o * self.hidden + k];
            }
        }
        for k in 0..self.hidden {
            let da = dh[k] * (1.0 - h[k] * h[k]);
            grad[o_b1 + k] += da;
            for (j, &xj) in x.iter().enumerate() {
                grad[k * self.inputs + j] += da * xj;
            }
        }
    }

    fn to_tensors(&self) -> MlpTensors {
        let (o_b1, o_w2, o_b2) = self.offsets();
        MlpTensors {
            w1: self.theta[..o_b1].chunks(self.inputs).map(<[f64]>::to_vec).collect(),
            b1: self.theta[o_b1..o_w2].to_vec(),
            w2: self.theta[o_w2..o_b2].chunks(self.hidden).map(<[f64]>::to_vec).collect(),
            b2: self.theta[o_b2..].to_vec(),
        }
    }

    fn from_tensors(t: MlpTensors) -> Result<Self, PpoError> {
        let hidden = t.b1.len();
        let outputs = t.b2.len();
        let inputs = t.w1.first().map_or(0, Vec::len);
        let shapes_ok = t.w1.len() == hidden
            && t.w1.iter().all(|r| r.len() == inputs)
            && t.w2.len() == outputs
            && t.w2.iter().all(|r| r.len() == hidden)
            && inputs > 0;
        if !shapes_ok {
            return Err(PpoError::Checkpoint("tensor shapes".into()));
        }
        let mut theta: Vec<f64> = t.w1.into_iter().flatten().collect();
        theta.extend(t.b1);
        theta.extend(t.w2.into_iter().flatten());
        theta.extend(t.b2);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(PpoError::Checkpoint("non-finite weight".into()));
        }
        Ok(Self {
            inputs,
            hidden,
            outputs,
            theta,
        })
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub policy: Mlp,
    pub value: Mlp,
}

impl ActorCritic {
    pub fn init(hidden: usize, rng: &mut Rng) -> Self {
        Self {
            policy: Mlp::init(FEATURE_DIM, hidden, NUM_ACTIONS, 0.01, rng),
            value: Mlp::init(FEATURE_DIM, hidden, 1, 1.0, rng),
        }
    }

    fn check(&self, x: &[f64]) -> Result<(), PpoError> {
        if x.len() != self.policy.inputs {
            return Err(PpoError::Dimension {
                expected: self.policy.inputs,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn distribution(&self, x: &[f64]) -> Result<Vec<f64>, PpoError> {
        self.check(x)?;
        Ok(softmax(&self.policy.forward(x, &mut Vec::new())))
    }

    pub fn value_of(&self, x: &[f64]) -> f64 {
        self.value.forward(x, &mut Vec::new())[0]
    }

    pub fn to_json(&self) -> String {
        let file = PolicyFile {
            format: POLICY_FORMAT.into(),
            policy: self.policy.to_tensors(),
            value: self.value.to_tensors(),
        };
        serde_json::to_string_pretty(&file).expect("policy serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, PpoError> {
        let file: PolicyFile = serde_json::from_str(text).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
        if file.format != POLICY_FORMAT {
            return Err(PpoError::Checkpoint(format!("format {:?}", file.format)));
        }
        let policy = Mlp::from_tensors(file.policy)?;
        let value = Mlp::from_tensors(file.value)?;
        if policy.outputs != NUM_ACTIONS || value.outputs != 1 || policy.inputs != FEATURE_DIM || value.inputs != FEATURE_DIM {
            return Err(PpoError::Checkpoint("network heads".into()));
        }
        Ok(Self { policy, value })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    policy: MlpTensors,
    value: MlpTensors,
}

/// Advantages and returns; `dones[t]` cuts the bootstrap after step `t`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae inputs differ in length");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * cont - values[t];
        next_adv = delta + gamma * lam * cont * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub features: Vec<f64>,
    pub action: u8,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    /// Interval means of the raw streams r1, r2, r3.
    pub streams: [f64; 3],
    pub advantage: f64,
    pub ret: f64,
}

/// FIFO transition store.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    pub capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Exactly `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect()
    }
}

/// Rescale advantages to zero mean and unit (population) std.
pub fn normalize_advantages(batch: &mut [Transition]) {
    let n = batch.len() as f64;
    if batch.is_empty() {
        return;
    }
    let mean = batch.iter().map(|t| t.advantage).sum::<f64>() / n;
    let var = batch.iter().map(|t| (t.advantage - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for t in batch.iter_mut() {
        t.advantage = if std > 1e-12 { (t.advantage - mean) / std } else { 0.0 };
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Mean clipped-surrogate loss over `batch` and its gradients.
pub fn ppo_loss_and_grad(net: &ActorCritic, batch: &[Transition], cfg: &PpoConfig) -> Result<(UpdateStats, Vec<f64>, Vec<f64>), PpoError> {
    let n = batch.len().max(1) as f64;
    let mut gp = vec![0.0; net.policy.theta.len()];
    let mut gv = vec![0.0; net.value.theta.len()];
    let mut s = UpdateStats::default();
    let mut h = Vec::new();
    for t in batch {
        net.check(&t.features)?;
        let logits = net.policy.forward(&t.features, &mut h);
        let probs = softmax(&logits);
        let a = usize::from(t.action);
        let logp = probs[a].ln();
        let ratio = (logp - t.log_prob).exp();
        let adv = t.advantage;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let surrogate = (ratio * adv).min(clipped * adv);
        let ent = entropy(&probs);
        s.policy_loss -= surrogate / n;
        s.entropy += ent / n;
        s.approx_kl += (t.log_prob - logp) / n;
        if (ratio - 1.0).abs() > cfg.clip {
            s.clip_fraction += 1.0 / n;
        }
        let active = !((adv > 0.0 && ratio > 1.0 + cfg.clip) || (adv < 0.0 && ratio < 1.0 - cfg.clip));
        let g_logp = if active { -adv * ratio } else { 0.0 };
        let dz: Vec<f64> = (0..NUM_ACTIONS)
            .map(|k| {
                let ind = if k == a { 1.0 } else { 0.0 };
                let d_ent = -probs[k] * (probs[k].max(1e-300).ln() + ent);
                (g_logp * (ind - probs[k]) - cfg.entropy_coef * d_ent) / n
            })
            .collect();
        net.policy.backward(&t.features, &h, &dz, &mut gp);

        let v = net.value.forward(&t.features, &mut h)[0];
        s.value_loss += 0.5 * (v - t.ret).powi(2) / n;
        net.value.backward(&t.features, &h, &[(v - t.ret) / n], &mut gv);
    }
    let total = s.policy_loss + s.value_loss - cfg.entropy_coef * s.entropy;
    if !total.is_finite() || gp.iter().chain(&gv).any(|g| !g.is_finite()) {
        return Err(PpoError::NonFinite {
            policy_loss: s.policy_loss,
            value_loss: s.value_loss,
            max_adv: batch.iter().fold(0.0f64, |m, t| m.max(t.advantage.abs())),
        });
    }
    Ok((s, gp, gv))
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub policy: Adam,
    pub value: Adam,
}

impl Optimizer {
    pub fn new(net: &ActorCritic) -> Self {
        Self {
            policy: Adam::new(net.policy.theta.len()),
            value: Adam::new(net.value.theta.len()),
        }
    }
}

/// Normalise the batch's advantages, then take `minibatches` Adam steps on
/// consecutive slices of `batch` transitions of a shuffled copy.
pub fn ppo_update(net: &mut ActorCritic, opt: &mut Optimizer, sample: &[Transition], cfg: &PpoConfig, rng: &mut Rng) -> Result<UpdateStats, PpoError> {
    let mut batch = sample.to_vec();
    normalize_advantages(&mut batch);
    batch.shuffle(rng);
    let mut stats = UpdateStats::default();
    let mut steps = 0.0;
    for k in 0..cfg.minibatches {
        let start = (k * cfg.batch) % batch.len().max(1);
        let mb: Vec<Transition> = (0..cfg.batch.min(batch.len())).map(|i| batch[(start + i) % batch.len()].clone()).collect();
        if mb.is_empty() {
            break;
        }
        let (s, gp, gv) = ppo_loss_and_grad(net, &mb, cfg)?;
        opt.policy.step(&mut net.policy.theta, &gp, cfg.lr);
        opt.value.step(&mut net.value.theta, &gv, cfg.lr);
        stats.policy_loss += s.policy_loss;
        stats.value_loss += s.value_loss;
        stats.entropy += s.entropy;
        stats.clip_fraction += s.clip_fraction;
        stats.approx_kl += s.approx_kl;
        steps += 1.0;
    }
    if steps > 0.0 {
        stats.policy_loss /= steps;
        stats.value_loss /= steps;
        stats.entropy /= steps;
        stats.clip_fraction /= steps;
        stats.approx_kl /= steps;
    }
    Ok(stats)
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Pending {
    index: usize,
    steps: u32,
    hat_sum: f64,
    raw_sum: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// Per junction, in decision order.
    pub trajectories: Vec<Vec<Transition>>,
    pub metrics: EpisodeMetrics,
    /// Mean raw streams over all shaping evaluations.
    pub mean_streams: [f64; 3],
}

/// Reward context for a rollout.
pub struct Shaper<'a> {
    pub cfg: &'a ShapingConfig,
    pub scorer: Option<&'a dyn Scoring>,
    pub lambda: f64,
}

/// Run one episode under `net`, shaping every step and closing a transition
/// at each decision point.
pub fn rollout(net: &ActorCritic, env: &SimConfig, shaper: &Shaper<'_>, norm: &mut StreamNormalizer, mode: ActionMode, rng: &mut Rng) -> Result<Rollout, PpoError> {
    if shaper.cfg.use_intrinsic && shaper.scorer.is_none() {
        return Err(PpoError::MissingScorer);
    }
    let mut state = sim::init_network(env.clone())?;
    let nj = state.num_junctions();
    let mut trajectories: Vec<Vec<Transition>> = vec![Vec::new(); nj];
    let mut pending: Vec<Option<Pending>> = vec![None; nj];
    let mut obs = state.observe_all();
    let mut stream_sum = [0.0; 3];
    let mut evaluations = 0u64;
    let close = |p: Pending, traj: &mut Vec<Transition>, done: bool| {
        let n = f64::from(p.steps.max(1));
        let t = &mut traj[p.index];
        t.reward = p.hat_sum / n;
        t.streams = p.raw_sum.map(|r| r / n);
        t.done = done;
    };
    while !state.is_done() {
        let mut actions = Vec::with_capacity(nj);
        for j in 0..nj {
            if !state.at_decision_point(j) {
                actions.push(state.current_phase(j));
                continue;
            }
            if let Some(p) = pending[j].take() {
                close(p, &mut trajectories[j], false);
            }
            let x = policy_features(&obs[j], env.green_s);
            let probs = net.distribution(&x)?;
            let a = match mode {
                ActionMode::Greedy => (0..NUM_ACTIONS).max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a))).unwrap_or(0),
                ActionMode::Sample => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = NUM_ACTIONS - 1;
                    for (k, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    pick
                }
            };
            trajectories[j].push(Transition {
                log_prob: probs[a].ln(),
                value: net.value_of(&x),
                features: x,
                action: a as u8,
                reward: 0.0,
                done: false,
                streams: [0.0; 3],
                advantage: 0.0,
                ret: 0.0,
            });
            pending[j] = Some(Pending {
                index: trajectories[j].len() - 1,
                ..Pending::default()
            });
            actions.push(Phase::ALL[a]);
        }
        state.advance(&actions);
        obs = state.observe_all();
        for (j, o) in obs.iter().enumerate() {
            let m = safety_mask(o, shaper.cfg);
            state.log_mut().record_mask(m);
            let r_ext = external_reward_tl(o, shaper.cfg.lambda_delay);
            let r_phi = match (shaper.cfg.use_intrinsic, shaper.scorer) {
                (true, Some(s)) => s.score_fields(&CaptionFields::from_observation(o)),
                _ => 0.0,
            };
            let raw = mixed_streams(r_ext, r_phi, m, shaper.lambda, shaper.cfg);
            let hat = norm.update_and_normalize(raw, shaper.cfg);
            for k in 0..3 {
                stream_sum[k] += raw[k];
            }
            evaluations += 1;
            if let Some(p) = pending[j].as_mut() {
                p.steps += 1;
                p.hat_sum += hat.sum;
                for k in 0..3 {
                    p.raw_sum[k] += raw[k];
                }
            }
        }
    }
    for j in 0..nj {
        if let Some(p) = pending[j].take() {
            close(p, &mut trajectories[j], true);
        }
    }
    let denom = evaluations.max(1) as f64;
    Ok(Rollout {
        trajectories,
        metrics: state.metrics(),
        mean_streams: stream_sum.map(|s| s / denom),
    })
}

/// Fill advantages and returns of one trajectory in place.
pub fn annotate(traj: &mut [Transition], cfg: &PpoConfig) {
    let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = traj.iter().map(|t| t.value).collect();
    let dones: Vec<bool> = traj.iter().map(|t| t.done).collect();
    let (adv, ret) = gae(&rewards, &values, &dones, 0.0, cfg.gamma_discount, cfg.gae_lambda);
    for ((t, a), r) in traj.iter_mut().zip(adv).zip(ret) {
        t.advantage = a;
        t.ret = r;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: u32,
    pub att: Option<f64>,
    pub aql: f64,
    pub awt: Option<f64>,
    pub ttc_p10: f64,
    pub brakes_per_km: f64,
    pub oscillation: f64,
    pub mask_rate: f64,
    pub mean_r1: f64,
    pub mean_r2: f64,
    pub mean_r3: f64,
}

pub const CURVE_HEADER: &str = "iter,att,aql,awt,ttc_p10,brakes_per_km,oscillation,mask_rate,mean_r1,mean_r2,mean_r3";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curve_csv(curve: &[IterationRecord]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in curve {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            opt_field(r.att),
            r.aql,
            opt_field(r.awt),
            r.ttc_p10,
            r.brakes_per_km,
            r.oscillation,
            r.mask_rate,
            r.mean_r1,
            r.mean_r2,
            r.mean_r3
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub net: ActorCritic,
    pub curve: Vec<IterationRecord>,
    pub normalizer: StreamNormalizer,
}

/// Seed of training episode `e` of iteration `iter`.
pub fn episode_seed(seed: u64, iter: u32, e: u32) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, streams::EPISODE_SEEDS), (u64::from(iter) << 32) | u64::from(e))
}

/// Seeds of the evaluation episodes for a run seed.
pub fn eval_seeds(seed: u64, n: u32) -> Vec<u64> {
    (0..n).map(|k| rng::derive_seed(rng::derive_seed(seed, streams::EVAL_SEEDS), u64::from(k))).collect()
}

pub fn train_policy(env: &SimConfig, scorer: Option<&dyn Scoring>, shaping: &ShapingConfig, cfg: &PpoConfig, seed: u64) -> Result<TrainedPolicy, PpoError> {
    cfg.validate()?;
    shaping.validate()?;
    env.validate()?;
    if shaping.use_intrinsic && scorer.is_none() {
        return Err(PpoError::MissingScorer);
    }
    let mut net = ActorCritic::init(cfg.hidden, &mut rng::stream(seed, streams::POLICY_INIT));
    let mut opt = Optimizer::new(&net);
    let mut buffer = ReplayBuffer::new(cfg.buffer);
    let mut norm = StreamNormalizer::default();
    let mut sample_rng = rng::stream(seed, streams::POLICY_SAMPLING);
    let mut curve = Vec::with_capacity(cfg.iterations as usize);
    for iter in 0..cfg.iterations {
        let shaper = Shaper {
            cfg: shaping,
            scorer,
            lambda: lambda_schedule(iter, shaping),
        };
        let mut metrics = Vec::new();
        let mut streams_acc = [0.0; 3];
        for e in 0..cfg.episodes {
            let ep_seed = episode_seed(seed, iter, e);
            let ep_env = SimConfig {
                seed: ep_seed,
                ..env.clone()
            };
            let mut action_rng = rng::stream(ep_seed, streams::POLICY_ACTIONS);
            let mut out = rollout(&net, &ep_env, &shaper, &mut norm, ActionMode::Sample, &mut action_rng)?;
            for traj in &mut out.trajectories {
                annotate(traj, cfg);
                for t in traj.drain(..) {
                    buffer.push(t);
                }
            }
            for k in 0..3 {
                streams_acc[k] += out.mean_streams[k] / f64::from(cfg.episodes);
            }
            metrics.push(out.metrics);
        }
        if !buffer.is_empty() {
            let sample = buffer.sample(cfg.sample, &mut sample_rng);
            ppo_update(&mut net, &mut opt, &sample, cfg, &mut sample_rng)?;
        }
        if let Some(m) = average_metrics(&metrics) {
            curve.push(IterationRecord {
                iter,
                att: m.att,
                aql: m.aql,
                awt: m.awt,
                ttc_p10: m.ttc_p10,
                brakes_per_km: m.brakes_per_km,
                oscillation: m.oscillation,
                mask_rate: m.mask_activation_rate,
                mean_r1: streams_acc[0],
                mean_r2: streams_acc[1],
                mean_r3: streams_acc[2],
            });
        }
    }
    Ok(TrainedPolicy {
        net,
        curve,
        normalizer: norm,
    })
}

/// Greedy evaluation on the given episode seeds; mask rates use `shaping`.
pub fn evaluate_policy(net: &ActorCritic, env: &SimConfig, shaping: &ShapingConfig, seeds: &[u64]) -> Result<Vec<EpisodeMetrics>, PpoError> {
    let probe = ShapingConfig {
        use_intrinsic: false,
        ..*shaping
    };
    let shaper = Shaper {
        cfg: &probe,
        scorer: None,
        lambda: 0.0,
    };
    seeds
        .iter()
        .map(|&s| {
            let ep_env = SimConfig { seed: s, ..env.clone() };
            let mut norm = StreamNormalizer::default();
            let mut rng = rng::stream(s, streams::POLICY_ACTIONS);
            rollout(net, &ep_env, &shaper, &mut norm, ActionMode::Greedy, &mut rng).map(|r| r.metrics)
        })
        .collect()
}
