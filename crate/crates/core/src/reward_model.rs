//! Caption feature encoding, the Bradley-Terry preference scorer and its training.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::caption::{extract_unstructured, parse_caption, shuffled_no_units, unstructured_caption, CaptionError, CaptionFields};
use crate::judge::LabeledPair;
use crate::rng::{self, streams};
use crate::stats;

pub const MODEL_FORMAT: &str = "reward-model-v1";
pub const NUMERIC_DIM: usize = 8;
pub const TRIGRAM_BUCKETS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    NumericOnly,
    StructuredFusion,
    Unstructured,
    /// Structured slots in random order with units stripped, hashed like prose.
    ShuffledNoUnits,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 4] = [
        FeatureMode::NumericOnly,
        FeatureMode::StructuredFusion,
        FeatureMode::Unstructured,
        FeatureMode::ShuffledNoUnits,
    ];
}

/// Schema groups removed from the features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMask {
    /// ttc_p10, ttc_p50, brakes, red_risk.
    pub risk: bool,
    /// q, p, delay, thru.
    pub congestion: bool,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("caption does not fit the encoder: {0}")]
    Encoding(#[from] CaptionError),
    #[error("feature dimension {found}, scorer expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite loss {loss} on a batch of {batch} pairs (max |Δr| = {max_gap}, max |θ| = {max_param})")]
    NonFinite {
        loss: f64,
        batch: usize,
        max_gap: f64,
        max_param: f64,
    },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("incompatible encoders: {0}")]
    Incompatible(String),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Bucket edges: a value falls in bin `k` when it is at least `edges[k-1]`
/// and below `edges[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTables {
    pub queue: Vec<f64>,
    pub delay: Vec<f64>,
    pub ttc: Vec<f64>,
    pub brakes: Vec<f64>,
}

impl Default for BinTables {
    fn default() -> Self {
        Self {
            queue: vec![1.0, 4.0, 9.0],
            delay: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0],
            ttc: vec![1.5, 3.0],
            brakes: vec![1.0, 3.0, 6.0],
        }
    }
}

fn bin(edges: &[f64], x: f64) -> usize {
    edges.iter().take_while(|&&e| x >= e).count()
}

/// Maps caption fields to a feature vector.
///
/// Structured layout: `[x(o) 8 | phase 4 | queue 4 sides x |queue bins| |
/// delay bins | ttc_p10 bins | ttc_p50 bins | red_risk 2 | brake bins]`,
/// 47 dims with the default tables. Prose modes append 256 hashed
/// character-trigram buckets, `ln(1 + count)`, to `x(o)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub mode: FeatureMode,
    pub mask: FieldMask,
    pub bins: BinTables,
    pub numeric_mean: [f64; NUMERIC_DIM],
    pub numeric_std: [f64; NUMERIC_DIM],
}

fn numeric(f: &CaptionFields) -> [f64; NUMERIC_DIM] {
    [
        f64::from(f.p[0]),
        f64::from(f.p[1]),
        f64::from(f.p[2]),
        f64::from(f.p[3]),
        f.delay,
        f.ttc_p10,
        f.ttc_p50,
        f64::from(f.brakes),
    ]
}

fn stable_seed(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn trigram_counts(text: &str) -> [f64; TRIGRAM_BUCKETS] {
    let lower = text.to_lowercase();
    let mut counts = [0.0; TRIGRAM_BUCKETS];
    for w in lower.as_bytes().windows(3) {
        counts[(fnv1a(w) % TRIGRAM_BUCKETS as u64) as usize] += 1.0;
    }
    counts.map(|c: f64| c.ln_1p())
}

impl Encoder {
    /// Encoder whose numeric standardisation is fitted on `fields`.
    pub fn fit(mode: FeatureMode, mask: FieldMask, fields: &[CaptionFields]) -> Self {
        let mut mean = [0.0; NUMERIC_DIM];
        let mut std = [1.0; NUMERIC_DIM];
        if !fields.is_empty() {
            let rows: Vec<[f64; NUMERIC_DIM]> = fields.iter().map(numeric).collect();
            for k in 0..NUMERIC_DIM {
                let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
                mean[k] = stats::mean(&col);
                let var = col.iter().map(|x| (x - mean[k]).powi(2)).sum::<f64>() / col.len() as f64;
                std[k] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
            }
        }
        Self {
            mode,
            mask,
            bins: BinTables::default(),
            numeric_mean: mean,
            numeric_std: std,
        }
    }

    fn structured_dim(&self) -> usize {
        let b = &self.bins;
        NUMERIC_DIM + 4 + 4 * (b.queue.len() + 1) + (b.delay.len() + 1) + 2 * (b.ttc.len() + 1) + 2 + (b.brakes.len() + 1)
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            FeatureMode::NumericOnly => NUMERIC_DIM,
            FeatureMode::StructuredFusion => self.structured_dim(),
            FeatureMode::Unstructured | FeatureMode::ShuffledNoUnits => NUMERIC_DIM + TRIGRAM_BUCKETS,
        }
    }

    /// Fields with the masked groups set to constants, so derived text
    /// carries no information about them.
    fn neutralized(&self, f: &CaptionFields) -> CaptionFields {
        let mut g = f.clone();
        if self.mask.congestion {
            g.q = [0; 4];
            g.p = [0; 4];
            g.delay = 0.0;
            g.thru = 0;
        }
        if self.mask.risk {
            g.ttc_p10 = 0.0;
            g.ttc_p50 = 0.0;
            g.brakes = 0;
            g.red_risk = false;
        }
        g
    }

    pub fn encode(&self, fields: &CaptionFields) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        let raw = numeric(fields);
        for k in 0..NUMERIC_DIM {
            let masked = (k < 5 && self.mask.congestion) || (k >= 5 && self.mask.risk);
            out.push(if masked { 0.0 } else { (raw[k] - self.numeric_mean[k]) / self.numeric_std[k] });
        }
        match self.mode {
            FeatureMode::NumericOnly => {}
            FeatureMode::StructuredFusion => self.push_slots(fields, &mut out),
            FeatureMode::Unstructured | FeatureMode::ShuffledNoUnits => {
                let g = self.neutralized(fields);
                let seed = stable_seed(&g.render());
                let text = if self.mode == FeatureMode::Unstructured {
                    unstructured_caption(&g, seed)
                } else {
                    shuffled_no_units(&g, seed)
                };
                out.extend_from_slice(&trigram_counts(&text));
            }
        }
        debug_assert_eq!(out.len(), self.dim());
        out
    }

    fn push_slots(&self, f: &CaptionFields, out: &mut Vec<f64>) {
        let b = &self.bins;
        let cong = !self.mask.congestion;
        let risk = !self.mask.risk;
        let mut one_hot = |n: usize, k: usize, on: bool| {
            for i in 0..n {
                out.push(if on && i == k { 1.0 } else { 0.0 });
            }
        };
        one_hot(4, f.phase.index(), true);
        for side in 0..4 {
            one_hot(b.queue.len() + 1, bin(&b.queue, f64::from(f.q[side])), cong);
        }
        one_hot(b.delay.len() + 1, bin(&b.delay, f.delay), cong);
        one_hot(b.ttc.len() + 1, bin(&b.ttc, f.ttc_p10), risk);
        one_hot(b.ttc.len() + 1, bin(&b.ttc, f.ttc_p50), risk);
        one_hot(2, usize::from(f.red_risk), risk);
        one_hot(b.brakes.len() + 1, bin(&b.brakes, f64::from(f.brakes)), risk);
    }

    /// Encode caption text. Structured modes require the canonical grammar;
    /// prose modes also accept prose, re-rendered from its extracted facts.
    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        let fields = match (self.mode, parse_caption(text)) {
            (_, Ok(f)) => f,
            (FeatureMode::Unstructured | FeatureMode::ShuffledNoUnits, Err(_)) => extract_unstructured(text)?,
            (_, Err(e)) => return Err(e.into()),
        };
        Ok(self.encode(&fields))
    }

    pub fn compatible(&self, other: &Encoder) -> Result<(), ModelError> {
        if self.mode != other.mode || self.mask != other.mask || self.bins != other.bins {
            return Err(ModelError::Incompatible(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                self.mode, self.mask, other.mode, other.mask
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// input -> tanh hidden layer -> scalar.
    Mlp,
    /// `w·f + b`, hidden layer bypassed.
    Linear,
}

/// Scorer parameters in one flat vector.
///
/// Mlp layout: `w1 (hidden x dim, row-major) | b1 | w2 | b2`; linear: `w | b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub kind: ScorerKind,
    pub dim: usize,
    pub hidden: usize,
    pub theta: Vec<f64>,
}

impl Scorer {
    pub fn zeros(kind: ScorerKind, dim: usize, hidden: usize) -> Self {
        let n = match kind {
            ScorerKind::Mlp => hidden * dim + 2 * hidden + 1,
            ScorerKind::Linear => dim + 1,
        };
        Self {
            kind,
            dim,
            hidden: if kind == ScorerKind::Linear { 0 } else { hidden },
            theta: vec![0.0; n],
        }
    }

    /// Symmetric uniform init scaled by fan-in.
    pub fn init(kind: ScorerKind, dim: usize, hidden: usize, rng: &mut rng::Rng) -> Self {
        let mut s = Self::zeros(kind, dim, hidden);
        let in_bound = 1.0 / (dim as f64).sqrt();
        match kind {
            ScorerKind::Mlp => {
                let out_bound = 1.0 / (hidden as f64).sqrt();
                let (w1, rest) = s.theta.split_at_mut(hidden * dim);
                let (b1, rest) = rest.split_at_mut(hidden);
                let (w2, b2) = rest.split_at_mut(hidden);
                w1.iter_mut().chain(b1.iter_mut()).for_each(|x| *x = rng.random_range(-in_bound..in_bound));
                w2.iter_mut().chain(b2.iter_mut()).for_each(|x| *x = rng.random_range(-out_bound..out_bound));
            }
            ScorerKind::Linear => s.theta.iter_mut().for_each(|x| *x = rng.random_range(-in_bound..in_bound)),
        }
        s
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn check(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::Dimension {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn score(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check(x)?;
        Ok(self.forward(x, &mut Vec::new()))
    }

    /// Forward pass; leaves hidden activations in `h`.
    fn forward(&self, x: &[f64], h: &mut Vec<f64>) -> f64 {
        let d = self.dim;
        match self.kind {
            ScorerKind::Linear => x.iter().zip(&self.theta[..d]).map(|(a, b)| a * b).sum::<f64>() + self.theta[d],
            ScorerKind::Mlp => {
                let hn = self.hidden;
                let (w1, rest) = self.theta.split_at(hn * d);
                let (b1, rest) = rest.split_at(hn);
                let (w2, b2) = rest.split_at(hn);
                h.clear();
                h.extend_from_slice(b1);
                for (j, &xj) in x.iter().enumerate() {
                    if xj != 0.0 {
                        for k in 0..hn {
                            h[k] += w1[k * d + j] * xj;
                        }
                    }
                }
                let mut r = b2[0];
                for k in 0..hn {
                    h[k] = h[k].tanh();
                    r += w2[k] * h[k];
                }
                r
            }
        }
    }

    /// Add `g · ∂r/∂θ` at input `x` into `grad`; `h` from the matching forward.
    fn backward(&self, x: &[f64], h: &[f64], g: f64, grad: &mut [f64]) {
        let d = self.dim;
        match self.kind {
            ScorerKind::Linear => {
                for (gj, xj) in grad[..d].iter_mut().zip(x) {
                    *gj += g * xj;
                }
                grad[d] += g;
            }
            ScorerKind::Mlp => {
                let hn = self.hidden;
                let w2 = &self.theta[hn * d + hn..hn * d + 2 * hn];
                let (gw1, rest) = grad.split_at_mut(hn * d);
                let (gb1, rest) = rest.split_at_mut(hn);
                let (gw2, gb2) = rest.split_at_mut(hn);
                gb2[0] += g;
                for k in 0..hn {
                    gw2[k] += g * h[k];
                    let da = g * w2[k] * (1.0 - h[k] * h[k]);
                    gb1[k] += da;
                    if da != 0.0 {
                        for (j, &xj) in x.iter().enumerate() {
                            if xj != 0.0 {
                                gw1[k * d + j] += da * xj;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Index of the output bias.
    pub fn output_bias_index(&self) -> usize {
        self.theta.len() - 1
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(z)`, stable for large |z|.
fn neg_log_sigmoid(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn bt_probability(r1: f64, r2: f64, tau: f64) -> f64 {
    sigmoid((r1 - r2) / tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub tau_bt: f64,
    pub eta: f64,
    pub zeta: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            tau_bt: 1.0,
            eta: 1e-4,
            zeta: 1e-2,
        }
    }
}

/// An encoded labelled pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub y: u8,
    pub w: f64,
}

/// Loss terms reported alongside the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub l2: f64,
    pub centering: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.nll + self.l2 + self.centering
    }
}

/// `Σ w·(-ln p(y)) + η‖θ‖² + ζ·(mean_ref r)²` and its exact gradient.
pub fn loss_and_gradient(scorer: &Scorer, batch: &[PairFeatures], reference: &[Vec<f64>], hyper: &Hyper) -> Result<(LossParts, Vec<f64>), ModelError> {
    let mut grad = vec![0.0; scorer.num_params()];
    let (mut h1, mut h2) = (Vec::new(), Vec::new());
    let mut nll = 0.0;
    let mut max_gap: f64 = 0.0;
    for p in batch {
        scorer.check(&p.f1)?;
        scorer.check(&p.f2)?;
        let r1 = scorer.forward(&p.f1, &mut h1);
        let r2 = scorer.forward(&p.f2, &mut h2);
        let s = if p.y == 1 { 1.0 } else { -1.0 };
        let z = s * (r1 - r2) / hyper.tau_bt;
        max_gap = max_gap.max((r1 - r2).abs());
        nll += p.w * neg_log_sigmoid(z);
        let dl_dgap = -p.w * s * (1.0 - sigmoid(z)) / hyper.tau_bt;
        scorer.backward(&p.f1, &h1, dl_dgap, &mut grad);
        scorer.backward(&p.f2, &h2, -dl_dgap, &mut grad);
    }
    let l2 = hyper.eta * scorer.theta.iter().map(|t| t * t).sum::<f64>();
    for (g, t) in grad.iter_mut().zip(&scorer.theta) {
        *g += 2.0 * hyper.eta * t;
    }
    let mut centering = 0.0;
    if hyper.zeta != 0.0 && !reference.is_empty() {
        let n = reference.len() as f64;
        let mut mu = 0.0;
        let mut hidden = Vec::with_capacity(reference.len());
        for x in reference {
            scorer.check(x)?;
            mu += scorer.forward(x, &mut h1);
            hidden.push(h1.clone());
        }
        mu /= n;
        centering = hyper.zeta * mu * mu;
        let g = 2.0 * hyper.zeta * mu / n;
        for (x, h) in reference.iter().zip(&hidden) {
            scorer.backward(x, h, g, &mut grad);
        }
    }
    let parts = LossParts { nll, l2, centering };
    if !parts.total().is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFinite {
            loss: parts.total(),
            batch: batch.len(),
            max_gap,
            max_param: scorer.theta.iter().fold(0.0f64, |m, t| m.max(t.abs())),
        });
    }
    Ok((parts, grad))
}

/// Anything that scores caption fields.
pub trait Scoring: Send + Sync {
    fn score_fields(&self, fields: &CaptionFields) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub encoder: Encoder,
    pub scorer: Scorer,
    pub hyper: Hyper,
}

impl Scoring for RewardModel {
    fn score_fields(&self, fields: &CaptionFields) -> f64 {
        self.scorer.forward(&self.encoder.encode(fields), &mut Vec::new())
    }
}

impl RewardModel {
    pub fn score_text(&self, text: &str) -> Result<f64, ModelError> {
        self.scorer.score(&self.encoder.encode_text(text)?)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.hyper.tau_bt > 0.0 && self.hyper.tau_bt.is_finite()) {
            return Err(ModelError::Invalid(format!("tau_bt {}", self.hyper.tau_bt)));
        }
        if self.encoder.dim() != self.scorer.dim {
            return Err(ModelError::Dimension {
                expected: self.scorer.dim,
                found: self.encoder.dim(),
            });
        }
        if self.scorer.theta.len() != Scorer::zeros(self.scorer.kind, self.scorer.dim, self.scorer.hidden).theta.len() {
            return Err(ModelError::Invalid("parameter count".into()));
        }
        if self.scorer.theta.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Invalid("non-finite weight".into()));
        }
        if self.encoder.numeric_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.encoder.numeric_mean.iter().any(|m| !m.is_finite()) {
            return Err(ModelError::Invalid("bad standardisation".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_model(self)).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ScorerTensors {
    Mlp { w1: Vec<Vec<f64>>, b1: Vec<f64>, w2: Vec<f64>, b2: f64 },
    Linear { w: Vec<f64>, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    encoder: Encoder,
    scorer: ScorerTensors,
    hyper: Hyper,
}

impl ModelFile {
    fn from_model(m: &RewardModel) -> Self {
        let s = &m.scorer;
        let (d, hn) = (s.dim, s.hidden);
        let scorer = match s.kind {
            ScorerKind::Mlp => ScorerTensors::Mlp {
                w1: s.theta[..hn * d].chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
                b1: s.theta[hn * d..hn * d + hn].to_vec(),
                w2: s.theta[hn * d + hn..hn * d + 2 * hn].to_vec(),
                b2: s.theta[hn * d + 2 * hn],
            },
            ScorerKind::Linear => ScorerTensors::Linear {
                w: s.theta[..d].to_vec(),
                b: s.theta[d],
            },
        };
        Self {
            format: MODEL_FORMAT.into(),
            encoder: m.encoder.clone(),
            scorer,
            hyper: m.hyper,
        }
    }

    fn into_model(self) -> Result<RewardModel, ModelError> {
        if self.format != MODEL_FORMAT {
            return Err(ModelError::Invalid(format!("format {:?}", self.format)));
        }
        let dim = self.encoder.dim();
        let scorer = match self.scorer {
            ScorerTensors::Mlp { w1, b1, w2, b2 } => {
                let hidden = b1.len();
                if w1.len() != hidden || w2.len() != hidden || w1.iter().any(|row| row.len() != dim) {
                    return Err(ModelError::Invalid("tensor shapes".into()));
                }
                let mut theta: Vec<f64> = w1.into_iter().flatten().collect();
                theta.extend(b1);
                theta.extend(w2);
                theta.push(b2);
                Scorer {
                    kind: ScorerKind::Mlp,
                    dim,
                    hidden,
                    theta,
                }
            }
            ScorerTensors::Linear { mut w, b } => {
                if w.len() != dim {
                    return Err(ModelError::Invalid("tensor shapes".into()));
                }
                w.push(b);
                Scorer {
                    kind: ScorerKind::Linear,
                    dim,
                    hidden: 0,
                    theta: w,
                }
            }
        };
        let model = RewardModel {
            encoder: self.encoder,
            scorer,
            hyper: self.hyper,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: FeatureMode,
    pub mask: FieldMask,
    pub kind: ScorerKind,
    pub hidden: usize,
    pub hyper: Hyper,
    pub lr: f64,
    pub momentum: f64,
    /// Minibatch size; at least the training-set size means full batch, unshuffled.
    pub batch_size: usize,
    pub epochs: usize,
    pub heldout_fraction: f64,
    pub reference_size: usize,
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::StructuredFusion,
            mask: FieldMask::default(),
            kind: ScorerKind::Mlp,
            hidden: 32,
            hyper: Hyper::default(),
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 64,
            epochs: 50,
            heldout_fraction: 0.2,
            reference_size: 1024,
            max_loss: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_accuracy: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("epoch,train_loss,heldout_accuracy\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.epoch, p.train_loss, p.heldout_accuracy));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RewardModel,
    pub initial: Scorer,
    /// Entry 0 is the initialisation, entry k is after epoch k.
    pub curve: Vec<CurvePoint>,
    pub train_idx: Vec<usize>,
    pub heldout_idx: Vec<usize>,
}

fn parse_fields(records: &[LabeledPair]) -> Result<Vec<(CaptionFields, CaptionFields)>, ModelError> {
    records
        .iter()
        .map(|r| Ok((parse_caption(&r.c1)?, parse_caption(&r.c2)?)))
        .collect()
}

fn pairwise_accuracy(deltas: &[f64], ys: &[u8]) -> f64 {
    if deltas.is_empty() {
        return f64::NAN;
    }
    let hits: f64 = deltas
        .iter()
        .zip(ys)
        .map(|(&d, &y)| {
            if d == 0.0 {
                0.5
            } else if (d > 0.0) == (y == 1) {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    hits / deltas.len() as f64
}

/// Momentum SGD on the weighted Bradley-Terry objective.
pub fn train_reward_model(records: &[LabeledPair], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome, ModelError> {
    if records.is_empty() {
        return Err(ModelError::Invalid("empty preference dataset".into()));
    }
    if !(cfg.heldout_fraction > 0.0 && cfg.heldout_fraction < 1.0) {
        return Err(ModelError::Invalid(format!("heldout fraction {}", cfg.heldout_fraction)));
    }
    if !(cfg.hyper.tau_bt > 0.0) {
        return Err(ModelError::Invalid(format!("tau_bt {}", cfg.hyper.tau_bt)));
    }
    let fields = parse_fields(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng::stream(seed, streams::REWARD_SPLIT));
    let n_held = ((records.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, records.len().saturating_sub(1).max(1));
    let heldout_idx: Vec<usize> = order[..n_held].to_vec();
    let mut train_idx: Vec<usize> = order[n_held..].to_vec();
    if train_idx.is_empty() {
        train_idx = heldout_idx.clone();
    }

    let train_fields: Vec<CaptionFields> = train_idx.iter().flat_map(|&i| [fields[i].0.clone(), fields[i].1.clone()]).collect();
    let encoder = Encoder::fit(cfg.mode, cfg.mask, &train_fields);
    let encode_pair = |i: usize, w: f64| PairFeatures {
        f1: encoder.encode(&fields[i].0),
        f2: encoder.encode(&fields[i].1),
        y: records[i].y,
        w,
    };
    let train: Vec<PairFeatures> = train_idx.iter().map(|&i| encode_pair(i, records[i].w)).collect();
    let held: Vec<PairFeatures> = heldout_idx.iter().map(|&i| encode_pair(i, records[i].w)).collect();

    let mut distinct: Vec<&CaptionFields> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for f in &train_fields {
            if seen.insert(f.render()) {
                distinct.push(f);
            }
        }
    }
    distinct.shuffle(&mut rng::stream(seed, streams::REWARD_REFERENCE));
    let reference: Vec<Vec<f64>> = distinct.iter().take(cfg.reference_size).map(|f| encoder.encode(f)).collect();

    let dim = encoder.dim();
    let initial = Scorer::init(cfg.kind, dim, cfg.hidden, &mut rng::stream(seed, streams::REWARD_INIT));
    let mut scorer = initial.clone();
    let mut velocity = vec![0.0; scorer.num_params()];
    let mut shuffle_rng = rng::stream(seed, streams::REWARD_SHUFFLE);
    let full_batch = cfg.batch_size >= train.len();
    let bs = cfg.batch_size.clamp(1, train.len());

    let mean_weight = |b: &[PairFeatures]| -> Vec<PairFeatures> {
        let n = b.len() as f64;
        b.iter().map(|p| PairFeatures { w: p.w / n, ..p.clone() }).collect()
    };
    let all_train = mean_weight(&train);
    let evaluate = |s: &Scorer| -> Result<CurvePoint, ModelError> {
        let (parts, _) = loss_and_gradient(s, &all_train, &reference, &cfg.hyper)?;
        let deltas: Vec<f64> = held.iter().map(|p| s.forward(&p.f1, &mut Vec::new()) - s.forward(&p.f2, &mut Vec::new())).collect();
        let ys: Vec<u8> = held.iter().map(|p| p.y).collect();
        Ok(CurvePoint {
            epoch: 0,
            train_loss: parts.total(),
            heldout_accuracy: pairwise_accuracy(&deltas, &ys),
        })
    };
    let mut curve = vec![evaluate(&scorer)?];
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        if !full_batch {
            idx.shuffle(&mut shuffle_rng);
        }
        for chunk in idx.chunks(bs) {
            let batch: Vec<PairFeatures> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (_, grad) = loss_and_gradient(&scorer, &mean_weight(&batch), &reference, &cfg.hyper)?;
            for ((t, v), g) in scorer.theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.lr * g;
                *t += *v;
            }
        }
        let point = CurvePoint { epoch, ..evaluate(&scorer)? };
        if point.train_loss > cfg.max_loss {
            return Err(ModelError::Diverged {
                epoch,
                loss: point.train_loss,
            });
        }
        curve.push(point);
    }
    Ok(TrainOutcome {
        model: RewardModel {
            encoder,
            scorer,
            hyper: cfg.hyper,
        },
        initial,
        curve,
        train_idx,
        heldout_idx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineEval {
    pub pairwise_accuracy: f64,
    pub auc: f64,
    pub spearman: Option<f64>,
}

/// Accuracy and AUC of `r(c1) - r(c2)` against the labels; Spearman between
/// scores and `utility` over the distinct captions when given.
pub fn evaluate_offline(scorer: &dyn Scoring, pairs: &[LabeledPair], utility: Option<&dyn Fn(&CaptionFields) -> f64>) -> Result<OfflineEval, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::Invalid("no held-out pairs".into()));
    }
    let fields = parse_fields(pairs)?;
    let deltas: Vec<f64> = fields.iter().map(|(a, b)| scorer.score_fields(a) - scorer.score_fields(b)).collect();
    let ys: Vec<u8> = pairs.iter().map(|p| p.y).collect();
    let positive: Vec<bool> = ys.iter().map(|&y| y == 1).collect();
    let spearman = utility.map(|u| {
        let mut seen = std::collections::HashSet::new();
        let (mut r, mut t) = (Vec::new(), Vec::new());
        for f in fields.iter().flat_map(|(a, b)| [a, b]) {
            if seen.insert(f.render()) {
                r.push(scorer.score_fields(f));
                t.push(u(f));
            }
        }
        stats::spearman(&r, &t)
    });
    Ok(OfflineEval {
        pairwise_accuracy: pairwise_accuracy(&deltas, &ys),
        auc: stats::auc(&deltas, &positive),
        spearman,
    })
}

/// `λ·r_source + (1-λ)·r_target`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScorer {
    pub source: RewardModel,
    pub target: RewardModel,
    pub lambda: f64,
}

pub fn fuse_scorers(source: RewardModel, target: RewardModel, lambda: f64) -> Result<FusedScorer, ModelError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::Invalid(format!("fusion lambda {lambda}")));
    }
    source.encoder.compatible(&target.encoder)?;
    Ok(FusedScorer { source, target, lambda })
}

impl Scoring for FusedScorer {
    fn score_fields(&self, f: &CaptionFields) -> f64 {
        self.lambda * self.source.score_fields(f) + (1.0 - self.lambda) * self.target.score_fields(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Phase;
    use rand::SeedableRng;

    const BASE: &str = "phase=NS_S; elapsed=12s; q=[N:3,E:1,S:4,W:0]veh; p=[N:2,E:-1,S:3,W:0]; delay=8.4s; thru=5veh/30s; ttc_p10=2.10s; ttc_p50=4.80s; brakes=1; red_risk=0; near_v=6.20m/s; near_a=-1.30m/s2; near_d=18.5m";

    fn random_fields(rng: &mut rng::Rng) -> CaptionFields {
        let mut f = parse_caption(BASE).unwrap();
        f.phase = Phase::ALL[rng.random_range(0..4)];
        f.q = std::array::from_fn(|_| rng.random_range(0..12));
        f.p = std::array::from_fn(|_| rng.random_range(-5..8));
        f.delay = (rng.random_range(0.0..70.0f64) * 10.0).round() / 10.0;
        f.ttc_p10 = (rng.random_range(0.5..10.0f64) * 100.0).round() / 100.0;
        f.ttc_p50 = (f.ttc_p10 + rng.random_range(0.0..3.0f64) * 100.0).round() / 100.0;
        f.brakes = rng.random_range(0..8);
        f.red_risk = rng.random_bool(0.2);
        f
    }

    #[test]
    fn dimensions() {
        let fit = |m| Encoder::fit(m, FieldMask::default(), &[]);
        assert_eq!(fit(FeatureMode::NumericOnly).dim(), 8);
        assert_eq!(fit(FeatureMode::StructuredFusion).dim(), 47);
        assert_eq!(fit(FeatureMode::Unstructured).dim(), 264);
        let f = parse_caption(BASE).unwrap();
        for m in FeatureMode::ALL {
            assert_eq!(fit(m).encode(&f).len(), fit(m).dim());
            assert_eq!(fit(m).encode(&f), fit(m).encode(&f));
        }
    }

    #[test]
    fn risk_mask_zeroes_positions() {
        let mut rng = rng::Rng::seed_from_u64(1);
        let e = Encoder::fit(FeatureMode::StructuredFusion, FieldMask { risk: true, congestion: false }, &[]);
        for _ in 0..50 {
            let x = e.encode(&random_fields(&mut rng));
            assert!(x[5..8].iter().all(|&v| v == 0.0));
            assert!(x[35..47].iter().all(|&v| v == 0.0));
        }
        let e = Encoder::fit(FeatureMode::Unstructured, FieldMask { risk: true, congestion: false }, &[]);
        let mut a = random_fields(&mut rng);
        let x = e.encode(&a);
        a.ttc_p10 = 0.7;
        a.brakes = 5;
        a.red_risk = !a.red_risk;
        assert_eq!(x, e.encode(&a));
    }

    #[test]
    fn structured_requires_grammar() {
        let e = Encoder::fit(FeatureMode::StructuredFusion, FieldMask::default(), &[]);
        assert!(e.encode_text("nice traffic today").is_err());
        assert!(e.encode_text(BASE).is_ok());
    }

    #[test]
    fn linear_dot_product() {
        let s = Scorer {
            kind: ScorerKind::Linear,
            dim: 2,
            hidden: 0,
            theta: vec![1.0, -1.0, 0.0],
        };
        assert_eq!(s.score(&[2.0, 3.0]).unwrap(), -1.0);
        assert!(s.score(&[1.0]).is_err());
        assert_eq!(Scorer::zeros(ScorerKind::Mlp, 5, 4).score(&[1.0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn bt_values() {
        assert_eq!(bt_probability(1.0, 1.0, 1.0), 0.5);
        assert!((bt_probability(2.0, 1.0, 1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((bt_probability(3.0, 1.0, 2.0) - bt_probability(1.5, 0.5, 1.0)).abs() < 1e-15);
        assert_eq!(bt_probability(0.3, -1.2, 0.7) + bt_probability(-1.2, 0.3, 0.7), 1.0);
    }

    #[test]
    fn hand_backprop_example() {
        let s = Scorer::zeros(ScorerKind::Linear, 2, 0);
        let batch = [PairFeatures {
            f1: vec![1.0, 0.0],
            f2: vec![0.0, 0.0],
            y: 1,
            w: 1.0,
        }];
        let hyper = Hyper {
            tau_bt: 1.0,
            eta: 0.0,
            zeta: 0.0,
        };
        let (l, g) = loss_and_gradient(&s, &batch, &[], &hyper).unwrap();
        assert!((l.total() - 2f64.ln()).abs() < 1e-15);
        assert!((g[0] + 0.5).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn l2_is_linear_in_eta() {
        let mut rng = rng::Rng::seed_from_u64(3);
        let s = Scorer::init(ScorerKind::Mlp, 8, 4, &mut rng);
        let batch = [PairFeatures {
            f1: vec![0.5; 8],
            f2: vec![-0.5; 8],
            y: 2,
            w: 1.0,
        }];
        let h = |eta| Hyper { eta, ..Hyper::default() };
        let (a, _) = loss_and_gradient(&s, &batch, &[], &h(1e-3)).unwrap();
        let (b, _) = loss_and_gradient(&s, &batch, &[], &h(2e-3)).unwrap();
        assert!((b.l2 - 2.0 * a.l2).abs() < 1e-15);
    }

    #[test]
    fn centering_shift() {
        let mut rng = rng::Rng::seed_from_u64(4);
        let mut s = Scorer::init(ScorerKind::Mlp, 8, 4, &mut rng);
        let reference: Vec<Vec<f64>> = (0..10).map(|i| vec![f64::from(i) / 10.0; 8]).collect();
        let batch = [PairFeatures {
            f1: vec![0.5; 8],
            f2: vec![-0.5; 8],
            y: 1,
            w: 1.0,
        }];
        let hyper = Hyper::default();
        let (before, _) = loss_and_gradient(&s, &batch, &reference, &hyper).unwrap();
        let mu = reference.iter().map(|x| s.score(x).unwrap()).sum::<f64>() / 10.0;
        let b = 0.7;
        let i = s.output_bias_index();
        s.theta[i] += b;
        let (after, _) = loss_and_gradient(&s, &batch, &reference, &hyper).unwrap();
        let expected = hyper.zeta * (2.0 * b * mu + b * b);
        assert!((after.centering - before.centering - expected).abs() < 1e-12);
    }

    #[test]
    fn fusion_arithmetic() {
        let e = Encoder::fit(FeatureMode::NumericOnly, FieldMask::default(), &[]);
        let constant = |c| RewardModel {
            encoder: e.clone(),
            scorer: Scorer {
                kind: ScorerKind::Linear,
                dim: 8,
                hidden: 0,
                theta: [vec![0.0; 8], vec![c]].concat(),
            },
            hyper: Hyper::default(),
        };
        let f = parse_caption(BASE).unwrap();
        let fused = fuse_scorers(constant(2.0), constant(-1.0), 0.5).unwrap();
        assert_eq!(fused.score_fields(&f), 0.5);
        assert_eq!(fuse_scorers(constant(2.0), constant(-1.0), 1.0).unwrap().score_fields(&f), 2.0);
        assert_eq!(fuse_scorers(constant(2.0), constant(-1.0), 0.0).unwrap().score_fields(&f), -1.0);
        let mut other = constant(0.0);
        other.encoder.mode = FeatureMode::StructuredFusion;
        assert!(fuse_scorers(constant(2.0), other, 0.5).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = rng::Rng::seed_from_u64(5);
        for kind in [ScorerKind::Mlp, ScorerKind::Linear] {
            let encoder = Encoder::fit(FeatureMode::StructuredFusion, FieldMask::default(), &[random_fields(&mut rng), random_fields(&mut rng)]);
            let model = RewardModel {
                scorer: Scorer::init(kind, encoder.dim(), 32, &mut rng),
                encoder,
                hyper: Hyper::default(),
            };
            let text = model.to_json();
            let back = RewardModel::from_json(&text).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.to_json(), text);
        }
        assert!(RewardModel::from_json("{}").is_err());
    }

}
