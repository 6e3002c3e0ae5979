//! Pairwise judges and preference dataset construction.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::caption::{parse_any, CaptionError, CaptionFields};
use crate::jsonl::{self, JsonlError};
use crate::pairs::{PoolRecord, PoolStats, SampledPairs};
use crate::rng::{self, streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "1")]
    First,
    #[serde(rename = "2")]
    Second,
    #[serde(rename = "abstain")]
    Abstain,
}

impl Verdict {
    pub fn flipped(self) -> Self {
        match self {
            Verdict::First => Verdict::Second,
            Verdict::Second => Verdict::First,
            Verdict::Abstain => Verdict::Abstain,
        }
    }

    /// Label for a decisive verdict: 1 or 2.
    pub fn label(self) -> Option<u8> {
        match self {
            Verdict::First => Some(1),
            Verdict::Second => Some(2),
            Verdict::Abstain => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("unreadable caption: {0}")]
    Caption(#[from] CaptionError),
    #[error("judge transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed judge response: {0}")]
    Response(String),
    #[error("judge cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("invalid judge config: {0}")]
    Config(String),
}

pub trait Judge {
    fn judge(&mut self, c1: &str, c2: &str) -> Result<Verdict, JudgeError>;

    /// Short identifier written into dataset metadata.
    fn id(&self) -> String;

    fn judge_batch(&mut self, pairs: &[(String, String)]) -> Vec<Result<Verdict, JudgeError>> {
        pairs.iter().map(|(a, b)| self.judge(a, b)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Balanced,
    SafetyFocused,
    EfficiencyFocused,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Balanced, Profile::SafetyFocused, Profile::EfficiencyFocused];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Balanced => "balanced",
            Profile::SafetyFocused => "safety_focused",
            Profile::EfficiencyFocused => "efficiency_focused",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Margins {
    pub eps_ttc: f64,
    pub eps_cong: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            eps_ttc: 0.2,
            eps_cong: 0.3,
        }
    }
}

/// Scales that turn queue and delay gaps into z-units for the congestion rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionScale {
    pub queue_std: f64,
    pub delay_std: f64,
}

impl CongestionScale {
    pub fn from_stats(stats: &PoolStats) -> Self {
        Self {
            queue_std: stats.queue.std.max(1e-8),
            delay_std: stats.delay.std.max(1e-8),
        }
    }

    pub fn congestion(&self, f: &CaptionFields) -> f64 {
        f.mean_queue() / self.queue_std + f.delay / self.delay_std
    }
}

impl Default for CongestionScale {
    fn default() -> Self {
        Self {
            queue_std: 1.0,
            delay_std: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    /// Prefer the side without red-light risk.
    RedRisk,
    /// Prefer the larger ttc_p10 when the gap exceeds the margin.
    Ttc(f64),
    /// Prefer lower congestion when the gap exceeds the margin.
    Congestion(f64),
    /// Prefer fewer harsh brakes when the gap is at least this many events.
    Brakes(u32),
}

pub fn rule_table(profile: Profile, m: &Margins) -> [Rule; 4] {
    match profile {
        Profile::Balanced => [Rule::RedRisk, Rule::Ttc(m.eps_ttc), Rule::Congestion(m.eps_cong), Rule::Brakes(1)],
        Profile::SafetyFocused => [Rule::Ttc(m.eps_ttc / 2.0), Rule::RedRisk, Rule::Brakes(1), Rule::Congestion(m.eps_cong)],
        Profile::EfficiencyFocused => [
            Rule::Congestion(m.eps_cong),
            Rule::RedRisk,
            Rule::Ttc(2.0 * m.eps_ttc),
            Rule::Brakes(2),
        ],
    }
}

fn prefer(first_better: bool) -> Verdict {
    if first_better {
        Verdict::First
    } else {
        Verdict::Second
    }
}

fn apply_rule(rule: Rule, a: &CaptionFields, b: &CaptionFields, scale: &CongestionScale) -> Option<Verdict> {
    match rule {
        Rule::RedRisk => (a.red_risk != b.red_risk).then(|| prefer(!a.red_risk)),
        Rule::Ttc(eps) => {
            let d = a.ttc_p10 - b.ttc_p10;
            (d.abs() > eps).then(|| prefer(d > 0.0))
        }
        Rule::Congestion(eps) => {
            let d = scale.congestion(a) - scale.congestion(b);
            (d.abs() > eps).then(|| prefer(d < 0.0))
        }
        Rule::Brakes(min_gap) => (a.brakes.abs_diff(b.brakes) >= min_gap).then(|| prefer(a.brakes < b.brakes)),
    }
}

/// Rule-based judge; a pure function of the two captions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticJudge {
    pub profile: Profile,
    pub margins: Margins,
    pub scale: CongestionScale,
}

impl SyntheticJudge {
    pub fn new(profile: Profile, margins: Margins, scale: CongestionScale) -> Self {
        Self { profile, margins, scale }
    }

    pub fn judge_fields(&self, a: &CaptionFields, b: &CaptionFields) -> Verdict {
        rule_table(self.profile, &self.margins)
            .into_iter()
            .find_map(|r| apply_rule(r, a, b, &self.scale))
            .unwrap_or(Verdict::Abstain)
    }
}

impl Judge for SyntheticJudge {
    fn judge(&mut self, c1: &str, c2: &str) -> Result<Verdict, JudgeError> {
        Ok(self.judge_fields(&parse_any(c1)?, &parse_any(c2)?))
    }

    fn id(&self) -> String {
        format!("synthetic:{}", self.profile.name())
    }
}

/// Prefers the caption with higher utility; abstains inside the margin.
pub struct UtilityJudge<F> {
    pub utility: F,
    pub margin: f64,
}

impl<F: Fn(&CaptionFields) -> f64> Judge for UtilityJudge<F> {
    fn judge(&mut self, c1: &str, c2: &str) -> Result<Verdict, JudgeError> {
        let d = (self.utility)(&parse_any(c1)?) - (self.utility)(&parse_any(c2)?);
        Ok(if d.abs() > self.margin { prefer(d > 0.0) } else { Verdict::Abstain })
    }

    fn id(&self) -> String {
        "utility".into()
    }
}

/// Flips decisive verdicts with probability `p_flip` and abstains with
/// probability `p_abstain`, from one uniform draw per query.
pub struct NoisyJudge<J> {
    pub inner: J,
    pub p_flip: f64,
    pub p_abstain: f64,
    rng: Rng,
}

impl<J: Judge> NoisyJudge<J> {
    pub fn new(inner: J, p_flip: f64, p_abstain: f64, seed: u64) -> Result<Self, JudgeError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(p_flip) || !ok(p_abstain) || p_flip + p_abstain > 1.0 {
            return Err(JudgeError::Config(format!("noise p_flip={p_flip} p_abstain={p_abstain}")));
        }
        Ok(Self {
            inner,
            p_flip,
            p_abstain,
            rng: rng::stream(seed, streams::JUDGE_NOISE),
        })
    }
}

impl<J: Judge> Judge for NoisyJudge<J> {
    fn judge(&mut self, c1: &str, c2: &str) -> Result<Verdict, JudgeError> {
        let clean = self.inner.judge(c1, c2)?;
        let u: f64 = self.rng.random();
        Ok(if u < self.p_abstain {
            Verdict::Abstain
        } else if u < self.p_abstain + self.p_flip {
            clean.flipped()
        } else {
            clean
        })
    }

    fn id(&self) -> String {
        format!("noisy({},flip={},abstain={})", self.inner.id(), self.p_flip, self.p_abstain)
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt_template_id: &'a str,
    c1: &'a str,
    c2: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    verdict: Verdict,
}

/// Decode a judge service response body.
pub fn parse_verdict_response(body: &str) -> Result<Verdict, JudgeError> {
    serde_json::from_str::<HttpResponse>(body)
        .map(|r| r.verdict)
        .map_err(|e| JudgeError::Response(e.to_string()))
}

/// Remote judge speaking `{prompt_template_id, c1, c2} -> {verdict}` over HTTP.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    pub endpoint: String,
    pub prompt_template_id: String,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub attempts: u32,
}

impl HttpJudge {
    pub fn new(endpoint: impl Into<String>, prompt_template_id: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            prompt_template_id: prompt_template_id.into(),
            cache_dir: None,
            max_in_flight: 8,
            timeout: Duration::from_secs(30),
            attempts: 3,
        }
    }

    pub fn cache_key(&self, c1: &str, c2: &str) -> String {
        let mut h = Sha256::new();
        for part in [self.prompt_template_id.as_str(), c1, c2] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn cached(&self, key: &str) -> Option<Verdict> {
        let text = fs::read_to_string(self.cache_path(key)?).ok()?;
        parse_verdict_response(&text).ok()
    }

    fn store(&self, key: &str, v: Verdict) -> Result<(), JudgeError> {
        if let Some(path) = self.cache_path(key) {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            let body = serde_json::json!({ "verdict": v }).to_string();
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, body)?;
            fs::rename(tmp, path)?;
        }
        Ok(())
    }

    fn request(&self, c1: &str, c2: &str) -> Result<Verdict, JudgeError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let body = HttpRequest {
            prompt_template_id: &self.prompt_template_id,
            c1,
            c2,
        };
        let mut last = String::new();
        for attempt in 0..self.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
            }
            match agent.post(&self.endpoint).send_json(&body) {
                Ok(resp) => {
                    let text = resp.into_string().map_err(|e| JudgeError::Response(e.to_string()))?;
                    return parse_verdict_response(&text);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(JudgeError::Transport {
            attempts: self.attempts.max(1),
            message: last,
        })
    }

    fn judge_one(&self, c1: &str, c2: &str) -> Result<Verdict, JudgeError> {
        let key = self.cache_key(c1, c2);
        if let Some(v) = self.cached(&key) {
            return Ok(v);
        }
        let v = self.request(c1, c2)?;
        self.store(&key, v)?;
        Ok(v)
    }
}

impl Judge for HttpJudge {
    fn judge(&mut self, c1: &str, c2: &str) -> Result<Verdict, JudgeError> {
        self.judge_one(c1, c2)
    }

    fn id(&self) -> String {
        format!("http:{}", self.prompt_template_id)
    }

    fn judge_batch(&mut self, pairs: &[(String, String)]) -> Vec<Result<Verdict, JudgeError>> {
        let width = self.max_in_flight.max(1);
        let this = &*self;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(width) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|(a, b)| s.spawn(move || this.judge_one(a, b))).collect();
                out.extend(handles.into_iter().map(|h| h.join().expect("judge worker panicked")));
            });
        }
        out
    }
}

pub const PREF_SCHEMA_VERSION: &str = "pref-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeMeta {
    pub judge: String,
    /// Abstentions while building the dataset this record belongs to.
    pub abstained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub schema_version: String,
    pub c1: String,
    pub c2: String,
    pub y: u8,
    pub w: f64,
    /// Template ids of the two captions, sorted.
    pub template_key: [u64; 2],
    pub pool_index: [usize; 2],
    pub judge_meta: JudgeMeta,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("record {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

impl LabeledPair {
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != PREF_SCHEMA_VERSION {
            return Err(format!("schema_version {:?}", self.schema_version));
        }
        if self.y != 1 && self.y != 2 {
            return Err(format!("label {}", self.y));
        }
        if !(self.w.is_finite() && self.w > 0.0) {
            return Err(format!("weight {}", self.w));
        }
        if self.template_key[0] > self.template_key[1] {
            return Err("template_key not sorted".into());
        }
        Ok(())
    }
}

pub fn parse_pref_dataset(text: &str) -> Result<Vec<LabeledPair>, DatasetError> {
    let records: Vec<LabeledPair> = jsonl::parse(text)?;
    for (index, r) in records.iter().enumerate() {
        r.validate().map_err(|reason| DatasetError::Invalid { index, reason })?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub sampled: usize,
    pub labeled: usize,
    pub abstained: usize,
    /// Pairs skipped because a caption could not be read.
    pub unreadable: usize,
    pub sampler_exhausted: bool,
    /// Decisive labels were fewer than a tenth of the sampled pairs.
    pub low_yield: bool,
}

/// `w = 1/ν` for each record's unordered template key, rescaled to mean 1.
pub fn frequency_weights(keys: &[[u64; 2]]) -> Vec<f64> {
    let mut counts: HashMap<[u64; 2], usize> = HashMap::new();
    for k in keys {
        *counts.entry(*k).or_default() += 1;
    }
    let raw: Vec<f64> = keys.iter().map(|k| 1.0 / counts[k] as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Label sampled pairs; abstentions and unreadable captions are dropped,
/// other judge failures abort.
pub fn build_pref_dataset(pool: &[PoolRecord], sampled: &SampledPairs, judge: &mut dyn Judge) -> Result<(Vec<LabeledPair>, BuildReport), JudgeError> {
    let queries: Vec<(String, String)> = sampled
        .pairs
        .iter()
        .map(|p| (pool[p.a].caption.text.clone(), pool[p.b].caption.text.clone()))
        .collect();
    let mut verdicts = Vec::with_capacity(queries.len());
    let mut unreadable = 0;
    for r in judge.judge_batch(&queries) {
        match r {
            Ok(v) => verdicts.push(Some(v)),
            Err(JudgeError::Caption(_)) => {
                unreadable += 1;
                verdicts.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let abstained = verdicts.iter().filter(|v| **v == Some(Verdict::Abstain)).count();
    let meta = JudgeMeta {
        judge: judge.id(),
        abstained,
    };
    let mut records = Vec::new();
    for ((p, (c1, c2)), v) in sampled.pairs.iter().zip(queries).zip(verdicts) {
        let Some(y) = v.and_then(Verdict::label) else { continue };
        let (t1, t2) = (pool[p.a].caption.template_id, pool[p.b].caption.template_id);
        records.push(LabeledPair {
            schema_version: PREF_SCHEMA_VERSION.into(),
            c1,
            c2,
            y,
            w: 1.0,
            template_key: [t1.min(t2), t1.max(t2)],
            pool_index: [p.a, p.b],
            judge_meta: meta.clone(),
        });
    }
    let keys: Vec<[u64; 2]> = records.iter().map(|r| r.template_key).collect();
    for (r, w) in records.iter_mut().zip(frequency_weights(&keys)) {
        r.w = w;
    }
    let sampled_n = sampled.pairs.len();
    let report = BuildReport {
        sampled: sampled_n,
        labeled: records.len(),
        abstained,
        unreadable,
        sampler_exhausted: sampled.exhausted,
        low_yield: records.len() * 10 < sampled_n,
    };
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::parse_caption;

    const BASE: &str = "phase=NS_S; elapsed=12s; q=[N:3,E:1,S:4,W:0]veh; p=[N:2,E:-1,S:3,W:0]; delay=8.4s; thru=5veh/30s; ttc_p10=2.10s; ttc_p50=4.80s; brakes=1; red_risk=0; near_v=6.20m/s; near_a=-1.30m/s2; near_d=18.5m";

    fn base() -> CaptionFields {
        parse_caption(BASE).unwrap()
    }

    fn judge(profile: Profile) -> SyntheticJudge {
        SyntheticJudge::new(profile, Margins::default(), CongestionScale::default())
    }

    #[test]
    fn profiles_disagree_on_tradeoff() {
        let b = base();
        let mut a = base();
        a.q = [0, 0, 1, 0];
        a.ttc_p10 = b.ttc_p10 - 0.5;
        assert_eq!(judge(Profile::Balanced).judge_fields(&a, &b), Verdict::Second);
        assert_eq!(judge(Profile::SafetyFocused).judge_fields(&a, &b), Verdict::Second);
        assert_eq!(judge(Profile::EfficiencyFocused).judge_fields(&a, &b), Verdict::First);
    }

    #[test]
    fn identical_captions_abstain() {
        for p in Profile::ALL {
            let mut j = judge(p);
            assert_eq!(j.judge(BASE, BASE).unwrap(), Verdict::Abstain);
        }
    }

    #[test]
    fn red_risk_decides_balanced() {
        let b = base();
        let mut a = base();
        a.red_risk = true;
        a.q = [0; 4];
        assert_eq!(judge(Profile::Balanced).judge_fields(&a, &b), Verdict::Second);
    }

    #[test]
    fn brake_margin_differs() {
        let b = base();
        let mut a = base();
        a.brakes = b.brakes + 1;
        assert_eq!(judge(Profile::Balanced).judge_fields(&a, &b), Verdict::Second);
        assert_eq!(judge(Profile::EfficiencyFocused).judge_fields(&a, &b), Verdict::Abstain);
    }

    #[test]
    fn noise_rates() {
        let mut a = base();
        a.ttc_p10 += 1.0;
        let better = a.render();
        let mut noisy = NoisyJudge::new(judge(Profile::Balanced), 0.2, 0.1, 9).unwrap();
        let n = 20_000;
        let mut counts = HashMap::new();
        for _ in 0..n {
            *counts.entry(noisy.judge(&better, BASE).unwrap()).or_insert(0usize) += 1;
        }
        let frac = |v| counts.get(&v).copied().unwrap_or(0) as f64 / n as f64;
        assert!((frac(Verdict::Second) - 0.2).abs() < 0.015);
        assert!((frac(Verdict::Abstain) - 0.1).abs() < 0.015);
        assert!(NoisyJudge::new(judge(Profile::Balanced), 0.7, 0.4, 0).is_err());
    }

    #[test]
    fn weight_rescaling_by_hand() {
        let w = frequency_weights(&[[1, 1], [2, 2], [3, 3], [3, 3]]);
        let expected = [4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(frequency_weights(&[[1, 2], [3, 4]]), vec![1.0, 1.0]);
    }

    #[test]
    fn weights_have_unit_mean() {
        let keys = [[1, 2], [1, 2], [1, 2], [3, 4]];
        let w = frequency_weights(&keys);
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert!((w[3] / w[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn verdict_wire_format() {
        assert_eq!(parse_verdict_response(r#"{"verdict":"1"}"#).unwrap(), Verdict::First);
        assert_eq!(parse_verdict_response(r#"{"verdict":"abstain"}"#).unwrap(), Verdict::Abstain);
        assert!(parse_verdict_response(r#"{"verdict":"3"}"#).is_err());
        assert!(parse_verdict_response("").is_err());
    }

    #[test]
    fn cache_key_depends_on_order() {
        let j = HttpJudge::new("http://127.0.0.1:9/", "tpl");
        assert_ne!(j.cache_key("a", "b"), j.cache_key("b", "a"));
        assert_eq!(j.cache_key("a", "b").len(), 64);
    }
}
