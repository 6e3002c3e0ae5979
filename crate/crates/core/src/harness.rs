//! Experiment orchestration: scenario registry, the cached three-stage
//! pipeline, ablation matrices, multi-seed aggregation and reports.
//!
//! Every stage output lives in `<root>/cache/<stage>-<hash>/`, where the hash
//! covers exactly the configuration that stage depends on. Per-cell copies of
//! the curves and metrics go to `<root>/runs/<name>/seed-<n>/`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::judge::{self, BuildReport, CongestionScale, DatasetError, HttpJudge, Judge, JudgeError, LabeledPair, Margins, NoisyJudge, Profile, SyntheticJudge};
use crate::jsonl::{self, JsonlError};
use crate::pairs::{self, CollectConfig, PairError, PairingConfig, PoolRecord, PoolStats};
use crate::ppo::{self, ActorCritic, PpoConfig, PpoError};
use crate::reward_model::{self, FeatureMode, FieldMask, ModelError, OfflineEval, RewardModel, TrainConfig};
use crate::shaping::{mixed_streams, safety_mask, ShapingConfig};
use crate::sim::record::{EpisodeRecord, ShapingRecord, StepRecord};
use crate::sim::{self, average_metrics, external_reward_tl, ConfigError, Diurnal, EpisodeMetrics, Phase, SimConfig, Surge};
use crate::stats;

/// Bumped whenever a stage's on-disk output changes meaning.
pub const CACHE_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "episode,seed,att,aql,awt,throughput,ttc_p10,ttc_p25,brakes_per_km,oscillation,mask_rate";
pub const TABLE_HEADER: &str = "variant,seeds,failed,att_mean,att_std,throughput_mean,throughput_std,ttc_p10_mean,ttc_p10_std,brakes_per_km_mean,brakes_per_km_std";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("unknown scenario {0:?}; expected gridRxC-steady, gridRxC-surge or gridRxC-diurnal")]
    Scenario(String),
    #[error("stage `{needed}` has no cached output for this configuration; run `{needed}` first (needed by `{by}`)")]
    MissingDependency { needed: Stage, by: Stage },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Sim(#[from] ConfigError),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PpoError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    serde_json::from_str(&read(path)?).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("harness records always serialize")
}

// ---------------------------------------------------------------- scenarios

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Demand {
    Steady,
    /// Ramp to four times the base rate over at most five minutes, starting a
    /// quarter of the way in.
    Surge,
    /// Two-peak daily profile compressed into the horizon.
    Diurnal,
}

/// Parsed scenario id such as `grid2x2-steady`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioId {
    pub rows: usize,
    pub cols: usize,
    pub demand: Demand,
}

impl FromStr for ScenarioId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || HarnessError::Scenario(s.to_string());
        let rest = s.strip_prefix("grid").ok_or_else(bad)?;
        let (size, demand) = rest.split_once('-').ok_or_else(bad)?;
        let (r, c) = size.split_once('x').ok_or_else(bad)?;
        let rows: usize = r.parse().map_err(|_| bad())?;
        let cols: usize = c.parse().map_err(|_| bad())?;
        let demand = match demand {
            "steady" => Demand::Steady,
            "surge" => Demand::Surge,
            "diurnal" => Demand::Diurnal,
            _ => return Err(bad()),
        };
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(Self { rows, cols, demand })
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.demand {
            Demand::Steady => "steady",
            Demand::Surge => "surge",
            Demand::Diurnal => "diurnal",
        };
        write!(f, "grid{}x{}-{}", self.rows, self.cols, d)
    }
}

impl ScenarioId {
    pub fn default_horizon(&self) -> f64 {
        match self.demand {
            Demand::Diurnal => 3600.0,
            _ => 600.0,
        }
    }

    pub fn sim_config(&self, arrival_rate: Option<f64>, horizon_s: Option<f64>) -> SimConfig {
        let base = SimConfig::default();
        let horizon_s = horizon_s.unwrap_or_else(|| self.default_horizon());
        SimConfig {
            grid_rows: self.rows,
            grid_cols: self.cols,
            arrival_rate_per_entry: arrival_rate.unwrap_or(base.arrival_rate_per_entry),
            horizon_s,
            surge: (self.demand == Demand::Surge).then(|| Surge {
                factor: 4.0,
                start_s: horizon_s / 4.0,
                ramp_s: (horizon_s / 4.0).min(300.0),
            }),
            diurnal: (self.demand == Demand::Diurnal).then(|| Diurnal::two_peak(horizon_s)),
            ..base
        }
    }
}

// ---------------------------------------------------------------- specs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Collect,
    Label,
    TrainReward,
    TrainPolicy,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Collect, Stage::Label, Stage::TrainReward, Stage::TrainPolicy, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Label => "label",
            Stage::TrainReward => "train-reward",
            Stage::TrainPolicy => "train-policy",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which reward streams the policy sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    ExternalOnly,
    /// Unsafe-state penalty without the learned reward.
    NoIntrinsic,
    /// Learned reward applied everywhere, no penalty.
    NoMask,
    Full,
}

impl Composition {
    pub const ALL: [Composition; 4] = [Composition::ExternalOnly, Composition::NoIntrinsic, Composition::NoMask, Composition::Full];

    pub fn name(self) -> &'static str {
        match self {
            Composition::ExternalOnly => "external_only",
            Composition::NoIntrinsic => "no_intrinsic",
            Composition::NoMask => "no_mask",
            Composition::Full => "full",
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            Composition::ExternalOnly => (false, false),
            Composition::NoIntrinsic => (false, true),
            Composition::NoMask => (true, false),
            Composition::Full => (true, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeSpec {
    Synthetic {
        profile: Profile,
    },
    Noisy {
        profile: Profile,
        p_flip: f64,
        #[serde(default)]
        p_abstain: f64,
    },
    Http {
        endpoint: String,
        #[serde(default = "default_template")]
        prompt_template_id: String,
    },
}

fn default_template() -> String {
    "pairwise-v1".into()
}

impl Default for JudgeSpec {
    fn default() -> Self {
        JudgeSpec::Synthetic {
            profile: Profile::Balanced,
        }
    }
}

impl FromStr for JudgeSpec {
    type Err = HarnessError;

    /// `synthetic:<profile>`, `noisy:<p_flip>[:<p_abstain>]` (balanced inner
    /// judge) or `http:<url>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| HarnessError::Spec(format!("judge {s:?}: {why}"));
        let (kind, arg) = s.split_once(':').ok_or_else(|| bad("expected kind:argument"))?;
        match kind {
            "synthetic" => Ok(JudgeSpec::Synthetic {
                profile: parse_profile(arg).ok_or_else(|| bad("unknown profile"))?,
            }),
            "noisy" => {
                let mut parts = arg.split(':');
                let mut prob = |name: &str| -> Result<f64, HarnessError> {
                    match parts.next() {
                        None => Ok(0.0),
                        Some(p) => p.parse().map_err(|_| bad(&format!("{name} is not a number"))),
                    }
                };
                let p_flip = prob("p_flip")?;
                let p_abstain = prob("p_abstain")?;
                Ok(JudgeSpec::Noisy {
                    profile: Profile::Balanced,
                    p_flip,
                    p_abstain,
                })
            }
            "http" => Ok(JudgeSpec::Http {
                endpoint: arg.to_string(),
                prompt_template_id: default_template(),
            }),
            _ => Err(bad("kind must be synthetic, noisy or http")),
        }
    }
}

pub fn parse_profile(s: &str) -> Option<Profile> {
    Profile::ALL.into_iter().find(|p| p.name() == s || p.name().trim_end_matches("_focused") == s)
}

impl JudgeSpec {
    pub fn profile(&self) -> Option<Profile> {
        match self {
            JudgeSpec::Synthetic { profile } | JudgeSpec::Noisy { profile, .. } => Some(*profile),
            JudgeSpec::Http { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match self {
            JudgeSpec::Noisy { p_flip, p_abstain, .. } => {
                let ok = |p: f64| (0.0..=1.0).contains(&p);
                if !ok(*p_flip) || !ok(*p_abstain) || p_flip + p_abstain > 1.0 {
                    return Err(HarnessError::Spec(format!("noise p_flip={p_flip} p_abstain={p_abstain}")));
                }
            }
            JudgeSpec::Http { endpoint, .. } if endpoint.is_empty() => {
                return Err(HarnessError::Spec("http judge needs an endpoint".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Ablation tags. They override the matching fields of the base configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub composition: Composition,
    pub feature_mode: FeatureMode,
    pub use_norm: bool,
    pub use_schedule: bool,
    pub judge: JudgeSpec,
    pub field_mask: FieldMask,
    pub pair_budget: usize,
    pub lambda_max: f64,
    pub tau_ttc: f64,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            composition: Composition::Full,
            feature_mode: FeatureMode::StructuredFusion,
            use_norm: true,
            use_schedule: true,
            judge: JudgeSpec::default(),
            field_mask: FieldMask::default(),
            pair_budget: 2000,
            lambda_max: 0.5,
            tau_ttc: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: String,
    /// Vehicles per second per entry; the simulator default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon_s: Option<f64>,
    pub stages: Vec<Stage>,
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub eval_episodes: u32,
    pub collect: CollectConfig,
    pub pairing: PairingConfig,
    pub margins: Margins,
    pub reward: TrainConfig,
    pub shaping: ShapingConfig,
    pub ppo: PpoConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            scenario: "grid2x2-steady".into(),
            arrival_rate: None,
            horizon_s: None,
            stages: Stage::ALL.to_vec(),
            seeds: (1..=5).collect(),
            variant: Variant::default(),
            eval_episodes: 5,
            collect: CollectConfig::default(),
            pairing: PairingConfig::default(),
            margins: Margins::default(),
            reward: TrainConfig::default(),
            shaping: ShapingConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl ExperimentSpec {
    /// Load a TOML spec, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = read(path)?;
        let spec: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| HarnessError::Spec(e.to_string()))?
        } else {
            Self::from_toml(&text)?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Spec(e.to_string()))
    }

    pub fn scenario_id(&self) -> Result<ScenarioId, HarnessError> {
        self.scenario.parse()
    }

    pub fn sim_config(&self) -> Result<SimConfig, HarnessError> {
        Ok(self.scenario_id()?.sim_config(self.arrival_rate, self.horizon_s))
    }

    /// Base shaping with the variant's flags and D2 parameters applied.
    pub fn resolved_shaping(&self) -> ShapingConfig {
        let (use_intrinsic, use_mask) = self.variant.composition.flags();
        ShapingConfig {
            use_intrinsic,
            use_mask,
            use_norm: self.variant.use_norm,
            use_schedule: self.variant.use_schedule,
            lambda_max: self.variant.lambda_max,
            tau_ttc: self.variant.tau_ttc,
            ..self.shaping
        }
    }

    pub fn resolved_reward(&self) -> TrainConfig {
        TrainConfig {
            mode: self.variant.feature_mode,
            mask: self.variant.field_mask,
            ..self.reward.clone()
        }
    }

    pub fn needs_scorer(&self) -> bool {
        self.variant.composition.flags().0
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let spec = |m: String| Err(HarnessError::Spec(m));
        if self.seeds.is_empty() {
            return spec("seeds must not be empty".into());
        }
        if self.stages.is_empty() {
            return spec("stages must not be empty".into());
        }
        if self.eval_episodes == 0 {
            return spec("eval_episodes must be >= 1".into());
        }
        if self.variant.pair_budget == 0 {
            return spec("pair_budget must be >= 1".into());
        }
        if self.variant.field_mask.risk && self.variant.field_mask.congestion {
            return spec("field_mask removes both field groups; nothing left to score".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return spec(format!("name {:?} is not usable as a directory", self.name));
        }
        self.variant.judge.validate()?;
        self.sim_config()?.validate()?;
        self.pairing.validate()?;
        self.resolved_shaping().validate().map_err(|e| HarnessError::Spec(e.to_string()))?;
        self.ppo.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------- hashing

/// Hex SHA-256 of the canonical JSON of `value`, truncated to 16 digits.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("configs always serialize");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}

/// Cache keys of each stage for one seed; `None` for stages that do not run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageKeys {
    pub collect: Option<String>,
    pub label: Option<String>,
    pub train_reward: Option<String>,
    pub train_policy: String,
    pub evaluate: String,
}

impl StageKeys {
    pub fn new(spec: &ExperimentSpec, seed: u64) -> Result<Self, HarnessError> {
        let env = spec.sim_config()?;
        let env_key = SimConfig { seed: 0, ..env };
        let (collect, label, train_reward) = if spec.needs_scorer() {
            let c = config_hash(&(CACHE_VERSION, "collect", &env_key, &spec.collect, seed));
            let v = &spec.variant;
            let l = config_hash(&(CACHE_VERSION, "label", &c, &spec.pairing, v.pair_budget, &v.judge, &spec.margins));
            let r = config_hash(&(CACHE_VERSION, "train-reward", &l, &spec.resolved_reward()));
            (Some(c), Some(l), Some(r))
        } else {
            (None, None, None)
        };
        let p = config_hash(&(CACHE_VERSION, "train-policy", &train_reward, &env_key, &spec.resolved_shaping(), &spec.ppo, seed));
        let e = config_hash(&(CACHE_VERSION, "evaluate", &p, spec.eval_episodes));
        Ok(Self {
            collect,
            label,
            train_reward,
            train_policy: p,
            evaluate: e,
        })
    }
}

// ---------------------------------------------------------------- workspace

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    pub key: String,
    pub cached: bool,
}

/// Artifact root shared by concurrent cells.
pub struct Workspace {
    root: PathBuf,
    locks: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
    tmp_counter: AtomicUsize,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            locks: Mutex::new(HashMap::new()),
            tmp_counter: AtomicUsize::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: Stage, key: &str) -> PathBuf {
        self.root.join("cache").join(format!("{}-{key}", stage.name()))
    }

    pub fn run_dir(&self, name: &str, seed: u64) -> PathBuf {
        self.root.join("runs").join(name).join(format!("seed-{seed}"))
    }

    /// Produce a stage directory unless it already exists. Returns whether
    /// the output came from the cache.
    fn stage(&self, stage: Stage, key: &str, allowed: bool, by: Stage, produce: impl FnOnce(&Path) -> Result<(), HarnessError>) -> Result<(bool, PathBuf), HarnessError> {
        let dir = self.stage_dir(stage, key);
        let lock = {
            let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
            locks.entry(dir.clone()).or_default().clone()
        };
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        if dir.is_dir() {
            return Ok((true, dir));
        }
        if !allowed {
            return Err(HarnessError::MissingDependency { needed: stage, by });
        }
        let parent = dir.parent().expect("stage dirs live under cache/");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let tmp = parent.join(format!(
            ".tmp-{}-{key}-{}-{}",
            stage.name(),
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        let produced = produce(&tmp);
        if let Err(e) = produced {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        if let Err(e) = fs::rename(&tmp, &dir) {
            let _ = fs::remove_dir_all(&tmp);
            if !dir.is_dir() {
                return Err(io_err(&dir)(e));
            }
        }
        Ok((false, dir))
    }
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub name: String,
    pub seed: u64,
    pub scenario: String,
    pub variant: Variant,
    pub stages: Vec<StageLog>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<BuildReport>,
    /// Mean over the evaluation episodes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EpisodeMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Split {
    train_idx: Vec<usize>,
    heldout_idx: Vec<usize>,
}

fn metric_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per evaluation episode.
pub fn metrics_csv(seeds: &[u64], metrics: &[EpisodeMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (k, (seed, m)) in seeds.iter().zip(metrics).enumerate() {
        s.push_str(&format!(
            "{k},{seed},{},{},{},{},{},{},{},{},{}\n",
            metric_field(m.att),
            m.aql,
            metric_field(m.awt),
            m.throughput,
            m.ttc_p10,
            m.ttc_p25,
            m.brakes_per_km,
            m.oscillation,
            m.mask_activation_rate
        ));
    }
    s
}

fn load_pool(dir: &Path) -> Result<Vec<PoolRecord>, HarnessError> {
    Ok(pairs::parse_pool(&read(&dir.join("pool.jsonl"))?)?)
}

fn load_prefs(dir: &Path) -> Result<Vec<LabeledPair>, HarnessError> {
    Ok(judge::parse_pref_dataset(&read(&dir.join("prefs.jsonl"))?)?)
}

fn make_judge(ws: &Workspace, spec: &JudgeSpec, margins: Margins, scale: CongestionScale, seed: u64) -> Result<Box<dyn Judge>, HarnessError> {
    Ok(match spec {
        JudgeSpec::Synthetic { profile } => Box::new(SyntheticJudge::new(*profile, margins, scale)),
        JudgeSpec::Noisy {
            profile,
            p_flip,
            p_abstain,
        } => Box::new(NoisyJudge::new(SyntheticJudge::new(*profile, margins, scale), *p_flip, *p_abstain, seed)?),
        JudgeSpec::Http {
            endpoint,
            prompt_template_id,
        } => {
            let mut j = HttpJudge::new(endpoint.clone(), prompt_template_id.clone());
            j.cache_dir = Some(ws.root.join("cache").join("http-judge"));
            Box::new(j)
        }
    })
}


/// One seed of one spec on its way through the stages.
struct Cell<'a> {
    ws: &'a Workspace,
    spec: &'a ExperimentSpec,
    seed: u64,
    keys: StageKeys,
    env: SimConfig,
    shaping: ShapingConfig,
    log: Vec<StageLog>,
}

impl Cell<'_> {
    fn key(&self, s: Stage) -> &str {
        let k = match s {
            Stage::Collect => self.keys.collect.as_deref(),
            Stage::Label => self.keys.label.as_deref(),
            Stage::TrainReward => self.keys.train_reward.as_deref(),
            Stage::TrainPolicy => Some(self.keys.train_policy.as_str()),
            Stage::Evaluate => Some(self.keys.evaluate.as_str()),
        };
        k.expect("stage keys exist for every stage that runs")
    }

    fn dir(&self, s: Stage) -> PathBuf {
        self.ws.stage_dir(s, self.key(s))
    }

    fn dependency(&self, s: Stage) -> Option<Stage> {
        match s {
            Stage::Collect => None,
            Stage::Label => Some(Stage::Collect),
            Stage::TrainReward => Some(Stage::Label),
            Stage::TrainPolicy => self.spec.needs_scorer().then_some(Stage::TrainReward),
            Stage::Evaluate => Some(Stage::TrainPolicy),
        }
    }

    /// Make sure the output of `s` exists, producing it and whatever it
    /// depends on when the spec's stage set allows.
    fn ensure(&mut self, s: Stage, by: Stage) -> Result<PathBuf, HarnessError> {
        let key = self.key(s).to_string();
        if self.log.iter().any(|l| l.stage == s) {
            return Ok(self.dir(s));
        }
        if self.dir(s).is_dir() {
            self.log.push(StageLog { stage: s, key, cached: true });
            return Ok(self.dir(s));
        }
        if !self.spec.stages.contains(&s) {
            return Err(HarnessError::MissingDependency { needed: s, by });
        }
        let upstream = match self.dependency(s) {
            Some(d) => Some(self.ensure(d, s)?),
            None => None,
        };
        let (cached, dir) = self.ws.stage(s, &key, true, by, |out| self.produce(s, upstream.as_deref(), out))?;
        self.log.push(StageLog { stage: s, key, cached });
        Ok(dir)
    }

    fn produce(&self, s: Stage, upstream: Option<&Path>, out: &Path) -> Result<(), HarnessError> {
        let spec = self.spec;
        match s {
            Stage::Collect => {
                let pool = pairs::collect_pool(&self.env, &spec.collect, self.seed)?;
                write(&out.join("pool.jsonl"), &jsonl::to_string(&pool))
            }
            Stage::Label => {
                let pool = load_pool(upstream.expect("label follows collect"))?;
                let sampled = pairs::sample_pairs(&pool, spec.variant.pair_budget, &spec.pairing, &mut pairs::sampler_rng(self.seed))?;
                let scale = CongestionScale::from_stats(&PoolStats::from_pool(&pool));
                let mut judge = make_judge(self.ws, &spec.variant.judge, spec.margins, scale, self.seed)?;
                let (records, report) = judge::build_pref_dataset(&pool, &sampled, judge.as_mut())?;
                write(&out.join("prefs.jsonl"), &jsonl::to_string(&records))?;
                write(&out.join("report.json"), &to_json(&report))
            }
            Stage::TrainReward => {
                let records = load_prefs(upstream.expect("training follows labelling"))?;
                let trained = reward_model::train_reward_model(&records, &spec.resolved_reward(), self.seed)?;
                write(&out.join("model.json"), &trained.model.to_json())?;
                write(&out.join("reward_curve.csv"), &reward_model::curve_csv(&trained.curve))?;
                let split = Split {
                    train_idx: trained.train_idx,
                    heldout_idx: trained.heldout_idx,
                };
                write(&out.join("split.json"), &to_json(&split))
            }
            Stage::TrainPolicy => {
                let model = match upstream {
                    Some(dir) => Some(RewardModel::from_json(&read(&dir.join("model.json"))?)?),
                    None => None,
                };
                let scorer = model.as_ref().map(|m| m as &dyn reward_model::Scoring);
                let trained = ppo::train_policy(&self.env, scorer, &self.shaping, &spec.ppo, self.seed)?;
                write(&out.join("policy.json"), &trained.net.to_json())?;
                write(&out.join("train_curve.csv"), &ppo::curve_csv(&trained.curve))
            }
            Stage::Evaluate => {
                let dir = upstream.expect("evaluation follows training");
                let net = ActorCritic::from_json(&read(&dir.join("policy.json"))?)?;
                let seeds = ppo::eval_seeds(self.seed, spec.eval_episodes);
                let metrics = ppo::evaluate_policy(&net, &self.env, &self.shaping, &seeds)?;
                write(&out.join("metrics.csv"), &metrics_csv(&seeds, &metrics))?;
                write(&out.join("metrics.json"), &to_json(&metrics))
            }
        }
    }
}

fn copy_into(src: &Path, dst_dir: &Path) -> Result<(), HarnessError> {
    let name = src.file_name().expect("artifact paths name a file");
    fs::copy(src, dst_dir.join(name)).map_err(io_err(src))?;
    Ok(())
}

/// Run the spec's stages for one seed, reusing cached outputs. Runs without
/// the learned reward skip stages 1 and 2.
pub fn run_cell(ws: &Workspace, spec: &ExperimentSpec, seed: u64) -> Result<CellManifest, HarnessError> {
    spec.validate()?;
    let mut cell = Cell {
        ws,
        spec,
        seed,
        keys: StageKeys::new(spec, seed)?,
        env: SimConfig { seed, ..spec.sim_config()? },
        shaping: spec.resolved_shaping(),
        log: Vec::new(),
    };
    let mut requested = spec.stages.clone();
    requested.sort();
    requested.dedup();
    for &s in &requested {
        if !spec.needs_scorer() && s <= Stage::TrainReward {
            continue;
        }
        cell.ensure(s, s)?;
    }

    let run_dir = ws.run_dir(&spec.name, seed);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let mut manifest = CellManifest {
        name: spec.name.clone(),
        seed,
        scenario: spec.scenario.clone(),
        variant: spec.variant.clone(),
        stages: cell.log.clone(),
        heldout_accuracy: None,
        labels: None,
        metrics: None,
    };
    if spec.needs_scorer() {
        let labels = cell.dir(Stage::Label);
        if labels.is_dir() {
            manifest.labels = Some(read_json(&labels.join("report.json"))?);
        }
        let model = cell.dir(Stage::TrainReward);
        if model.is_dir() {
            manifest.heldout_accuracy = heldout_accuracy(&model)?;
            copy_into(&model.join("reward_curve.csv"), &run_dir)?;
        }
    }
    let policy = cell.dir(Stage::TrainPolicy);
    if policy.is_dir() {
        copy_into(&policy.join("train_curve.csv"), &run_dir)?;
    }
    let eval = cell.dir(Stage::Evaluate);
    if eval.is_dir() {
        let all: Vec<EpisodeMetrics> = read_json(&eval.join("metrics.json"))?;
        manifest.metrics = average_metrics(&all);
        copy_into(&eval.join("metrics.csv"), &run_dir)?;
    }
    write(&run_dir.join("manifest.json"), &to_json(&manifest))?;
    Ok(manifest)
}

/// Final held-out accuracy from a model directory's curve.
fn heldout_accuracy(model_dir: &Path) -> Result<Option<f64>, HarnessError> {
    let text = read(&model_dir.join("reward_curve.csv"))?;
    Ok(text.lines().last().and_then(|l| l.rsplit(',').next()).and_then(|v| v.parse().ok()))
}

// ---------------------------------------------------------------- aggregation

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub variant: String,
    pub seed: u64,
    pub result: Result<CellManifest, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: stats::mean(values),
            std: stats::std_dev(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub seeds: usize,
    pub failed: usize,
    pub att: Summary,
    pub throughput: Summary,
    pub ttc_p10: Summary,
    pub brakes_per_km: Summary,
    pub heldout_accuracy: Option<Summary>,
}

fn successful(cells: &[CellOutcome]) -> impl Iterator<Item = &CellManifest> {
    cells.iter().filter_map(|c| c.result.as_ref().ok())
}

/// One row per variant, sorted by mean ATT ascending; rows without any ATT
/// sort last.
pub fn aggregate(cells: &[CellOutcome]) -> Vec<VariantRow> {
    let mut order: Vec<&str> = Vec::new();
    for c in cells {
        if !order.contains(&c.variant.as_str()) {
            order.push(&c.variant);
        }
    }
    let mut rows: Vec<VariantRow> = order
        .into_iter()
        .map(|v| {
            let mine: Vec<&CellOutcome> = cells.iter().filter(|c| c.variant == v).collect();
            let ok: Vec<&CellManifest> = mine.iter().filter_map(|c| c.result.as_ref().ok()).collect();
            let metric = |f: &dyn Fn(&EpisodeMetrics) -> Option<f64>| Summary::of(&ok.iter().filter_map(|m| m.metrics.as_ref().and_then(f)).collect::<Vec<_>>());
            let acc: Vec<f64> = ok.iter().filter_map(|m| m.heldout_accuracy).collect();
            VariantRow {
                variant: v.to_string(),
                seeds: mine.len(),
                failed: mine.len() - ok.len(),
                att: metric(&|m| m.att),
                throughput: metric(&|m| Some(m.throughput)),
                ttc_p10: metric(&|m| Some(m.ttc_p10)),
                brakes_per_km: metric(&|m| Some(m.brakes_per_km)),
                heldout_accuracy: (!acc.is_empty()).then(|| Summary::of(&acc)),
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.att.mean.is_nan(), b.att.mean.is_nan()) {
        (false, false) => a.att.mean.total_cmp(&b.att.mean),
        (x, y) => x.cmp(&y),
    });
    rows
}

fn num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

pub fn table_csv(rows: &[VariantRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.seeds,
            r.failed,
            num(r.att.mean),
            num(r.att.std),
            num(r.throughput.mean),
            num(r.throughput.std),
            num(r.ttc_p10.mean),
            num(r.ttc_p10.std),
            num(r.brakes_per_km.mean),
            num(r.brakes_per_km.std)
        ));
    }
    s
}

pub const CELLS_HEADER: &str = "variant,seed,status,att,throughput,ttc_p10,brakes_per_km,heldout_accuracy";

/// Every cell on its own line; failures carry `FAILED` and the error.
pub fn cells_csv(cells: &[CellOutcome]) -> String {
    let mut s = format!("{CELLS_HEADER}\n");
    for c in cells {
        match &c.result {
            Ok(m) => {
                let (att, thr, ttc, brk) = match &m.metrics {
                    Some(x) => (metric_field(x.att), num(x.throughput), num(x.ttc_p10), num(x.brakes_per_km)),
                    None => Default::default(),
                };
                s.push_str(&format!("{},{},ok,{att},{thr},{ttc},{brk},{}\n", c.variant, c.seed, metric_field(m.heldout_accuracy)));
            }
            Err(e) => {
                let msg = e.replace(['"', '\n'], " ");
                s.push_str(&format!("{},{},\"FAILED: {msg}\",,,,,\n", c.variant, c.seed));
            }
        }
    }
    s
}

/// Run `(spec, seed)` jobs on up to `workers` threads; results keep job order.
pub fn run_cells(ws: &Workspace, jobs: &[(ExperimentSpec, u64)], workers: usize) -> Vec<CellOutcome> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CellOutcome>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((spec, seed)) = jobs.get(i) else { break };
                let result = run_cell(ws, spec, *seed).map_err(|e| e.to_string());
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(CellOutcome {
                    variant: spec.name.clone(),
                    seed: *seed,
                    result,
                });
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub rows: Vec<VariantRow>,
}

impl PipelineOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

/// All seeds of one spec, then the aggregate table under `runs/<name>/`.
pub fn run_pipeline(ws: &Workspace, spec: &ExperimentSpec, workers: usize) -> Result<PipelineOutcome, HarnessError> {
    spec.validate()?;
    let jobs: Vec<(ExperimentSpec, u64)> = spec.seeds.iter().map(|&s| (spec.clone(), s)).collect();
    let cells = run_cells(ws, &jobs, workers);
    let rows = aggregate(&cells);
    let dir = ws.root.join("runs").join(&spec.name);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write(&dir.join("aggregate.csv"), &table_csv(&rows))?;
    write(&dir.join("cells.csv"), &cells_csv(&cells))?;
    Ok(PipelineOutcome { dir, cells, rows })
}

// ---------------------------------------------------------------- ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Matrix {
    A1,
    A2,
    A3,
    B1,
    B2,
    C2,
    D1,
    D2,
}

pub const D1_BUDGETS: [usize; 6] = [100, 250, 500, 1000, 2000, 4000];
pub const D2_LAMBDAS: [f64; 3] = [0.3, 0.5, 0.7];
pub const D2_TAUS: [f64; 3] = [1.3, 1.5, 1.8];

impl FromStr for Matrix {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "A1" => Matrix::A1,
            "A2" => Matrix::A2,
            "A3" => Matrix::A3,
            "B1" => Matrix::B1,
            "B2" => Matrix::B2,
            "C2" => Matrix::C2,
            "D1" => Matrix::D1,
            "D2" => Matrix::D2,
            _ => return Err(HarnessError::Spec(format!("unknown ablation matrix {s:?}"))),
        })
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

fn mode_name(m: FeatureMode) -> &'static str {
    match m {
        FeatureMode::NumericOnly => "numeric_only",
        FeatureMode::StructuredFusion => "structured_fusion",
        FeatureMode::Unstructured => "unstructured",
        FeatureMode::ShuffledNoUnits => "shuffled_no_units",
    }
}

impl Matrix {
    /// The matrix's variant specs, each named `<base>-<matrix>-<label>`.
    pub fn expand(self, base: &ExperimentSpec) -> Vec<ExperimentSpec> {
        let cell = |label: String, edit: &dyn Fn(&mut Variant)| {
            let mut s = base.clone();
            s.name = format!("{}-{self}-{label}", base.name);
            s.stages = Stage::ALL.to_vec();
            edit(&mut s.variant);
            s
        };
        let profile = base.variant.judge.profile().unwrap_or(Profile::Balanced);
        match self {
            Matrix::A1 => Composition::ALL.iter().map(|&c| cell(c.name().into(), &|v| v.composition = c)).collect(),
            Matrix::A2 => FeatureMode::ALL.iter().map(|&m| cell(mode_name(m).into(), &|v| v.feature_mode = m)).collect(),
            Matrix::A3 => [("default", true, true), ("no_norm", false, true), ("no_schedule", true, false)]
                .iter()
                .map(|&(l, n, sch)| {
                    cell(l.into(), &|v| {
                        v.use_norm = n;
                        v.use_schedule = sch;
                    })
                })
                .collect(),
            Matrix::B1 => Profile::ALL.iter().map(|&p| cell(p.name().into(), &|v| v.judge = JudgeSpec::Synthetic { profile: p })).collect(),
            Matrix::B2 => [("noiseless", 0.0, 0.0), ("p_flip_0.05", 0.05, 0.0), ("p_flip_0.15", 0.15, 0.05)]
                .iter()
                .map(|&(l, f, a)| {
                    cell(l.into(), &|v| {
                        v.judge = if f == 0.0 {
                            JudgeSpec::Synthetic { profile }
                        } else {
                            JudgeSpec::Noisy {
                                profile,
                                p_flip: f,
                                p_abstain: a,
                            }
                        }
                    })
                })
                .collect(),
            Matrix::C2 => [("all_fields", false, false), ("no_risk", true, false), ("no_congestion", false, true)]
                .iter()
                .map(|&(l, risk, congestion)| cell(l.into(), &|v| v.field_mask = FieldMask { risk, congestion }))
                .collect(),
            Matrix::D1 => D1_BUDGETS.iter().map(|&m| cell(format!("M{m}"), &|v| v.pair_budget = m)).collect(),
            Matrix::D2 => D2_LAMBDAS
                .iter()
                .flat_map(|&l| D2_TAUS.iter().map(move |&t| (l, t)))
                .map(|(l, t)| {
                    cell(format!("lambda{l}_tau{t}"), &|v| {
                        v.lambda_max = l;
                        v.tau_ttc = t;
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D1Row {
    pub pair_budget: usize,
    pub heldout_accuracy: f64,
    pub att: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D2Grid {
    /// `(lambda_max, tau_ttc, mean ATT)` in grid order.
    pub cells: Vec<(f64, f64, f64)>,
    /// `(max - min) / mean` of the cell ATTs.
    pub spread: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub matrix: Matrix,
    pub dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub rows: Vec<VariantRow>,
    pub d1: Vec<D1Row>,
    pub d2: Option<D2Grid>,
}

impl AblationOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

fn variant_mean(cells: &[CellOutcome], name: &str, f: impl Fn(&CellManifest) -> Option<f64>) -> f64 {
    let v: Vec<f64> = successful(cells).filter(|m| m.name == name).filter_map(f).collect();
    stats::mean(&v)
}

/// Expand a matrix over the base spec's seeds, run every cell and write
/// `table.csv` and `cells.csv` (plus `d1.csv` / `d2.csv`) under
/// `ablations/<base>-<matrix>/`.
pub fn run_ablation(ws: &Workspace, matrix: Matrix, base: &ExperimentSpec, workers: usize) -> Result<AblationOutcome, HarnessError> {
    base.validate()?;
    let specs = matrix.expand(base);
    for s in &specs {
        s.validate()?;
    }
    let jobs: Vec<(ExperimentSpec, u64)> = specs.iter().flat_map(|s| base.seeds.iter().map(move |&seed| (s.clone(), seed))).collect();
    let cells = run_cells(ws, &jobs, workers);
    let rows = aggregate(&cells);
    let dir = ws.root.join("ablations").join(format!("{}-{matrix}", base.name));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write(&dir.join("table.csv"), &table_csv(&rows))?;
    write(&dir.join("cells.csv"), &cells_csv(&cells))?;

    let mut d1 = Vec::new();
    if matrix == Matrix::D1 {
        let mut s = String::from("pair_budget,heldout_accuracy,att\n");
        for spec in &specs {
            let row = D1Row {
                pair_budget: spec.variant.pair_budget,
                heldout_accuracy: variant_mean(&cells, &spec.name, |m| m.heldout_accuracy),
                att: variant_mean(&cells, &spec.name, |m| m.metrics.as_ref().and_then(|x| x.att)),
            };
            s.push_str(&format!("{},{},{}\n", row.pair_budget, num(row.heldout_accuracy), num(row.att)));
            d1.push(row);
        }
        write(&dir.join("d1.csv"), &s)?;
    }
    let mut d2 = None;
    if matrix == Matrix::D2 {
        let grid: Vec<(f64, f64, f64)> = specs
            .iter()
            .map(|spec| {
                let att = variant_mean(&cells, &spec.name, |m| m.metrics.as_ref().and_then(|x| x.att));
                (spec.variant.lambda_max, spec.variant.tau_ttc, att)
            })
            .collect();
        let atts: Vec<f64> = grid.iter().map(|g| g.2).collect();
        let spread = stats::relative_spread(&atts);
        let mut s = String::from("lambda_max,tau_ttc,att\n");
        for (l, t, a) in &grid {
            s.push_str(&format!("{l},{t},{}\n", num(*a)));
        }
        s.push_str(&format!("# relative_spread,{}\n", num(spread)));
        write(&dir.join("d2.csv"), &s)?;
        d2 = Some(D2Grid { cells: grid, spread });
    }
    Ok(AblationOutcome {
        matrix,
        dir,
        cells,
        rows,
        d1,
        d2,
    })
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportOutcome {
    pub cells: usize,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>, warnings: &mut Vec<String>) {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            warnings.push(format!("{}: {e}", dir.display()));
            return;
        }
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n == "cache") {
                continue;
            }
            find_manifests(&p, out, warnings);
        } else if p.file_name().is_some_and(|n| n == "manifest.json") {
            out.push(p);
        }
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// ATT against TTC p10, one point per cell, coloured by variant.
pub fn pareto_svg(cells: &[CellManifest]) -> String {
    let pts: Vec<(&str, f64, f64)> = cells
        .iter()
        .filter_map(|c| c.metrics.as_ref().and_then(|m| m.att.map(|a| (c.name.as_str(), a, m.ttc_p10))))
        .collect();
    let (w, h, pad) = (640.0, 440.0, 60.0);
    let range = |f: &dyn Fn(&(&str, f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let margin = ((hi - lo) * 0.1).max(1e-3);
        (lo - margin, hi + margin)
    };
    let (x0, x1) = range(&|p| p.1);
    let (y0, y1) = range(&|p| p.2);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut names: Vec<&str> = Vec::new();
    for p in &pts {
        if !names.contains(&p.0) {
            names.push(p.0);
        }
    }
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    s.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - pad,
        r = w - pad
    ));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">ATT (s)</text>\n", w / 2.0, h - 20.0));
    s.push_str(&format!("<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">TTC p10 (s)</text>\n", h / 2.0, h / 2.0));
    if !pts.is_empty() {
        for (x, anchor) in [(x0, "start"), (x1, "end")] {
            s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\">{x:.1}</text>\n", sx(x), h - pad + 15.0));
        }
        for y in [y0, y1] {
            s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y:.2}</text>\n", pad - 4.0, sy(y) + 4.0));
        }
    }
    for p in &pts {
        let k = names.iter().position(|n| *n == p.0).unwrap_or(0);
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\"><title>{} ATT {:.2} TTC {:.2}</title></circle>\n",
            sx(p.1),
            sy(p.2),
            PALETTE[k % PALETTE.len()],
            p.0,
            p.1,
            p.2
        ));
    }
    for (k, n) in names.iter().enumerate() {
        let y = pad + 16.0 * k as f64;
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{y}\" r=\"4\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{n}</text>\n",
            w - pad - 150.0,
            PALETTE[k % PALETTE.len()],
            w - pad - 140.0,
            y + 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Collect every cell manifest under `inputs` into an aggregate table, a
/// markdown summary and an ATT vs TTC scatter in `out`. Problems become
/// warnings; nothing here is fatal.
pub fn report(inputs: &[PathBuf], out: &Path) -> ReportOutcome {
    let mut outcome = ReportOutcome::default();
    let mut paths = Vec::new();
    for dir in inputs {
        find_manifests(dir, &mut paths, &mut outcome.warnings);
    }
    let mut manifests = Vec::new();
    for p in paths {
        match read_json::<CellManifest>(&p) {
            Ok(m) => manifests.push(m),
            Err(e) => outcome.warnings.push(e.to_string()),
        }
    }
    outcome.cells = manifests.len();
    if manifests.is_empty() {
        outcome.warnings.push("no completed runs found".into());
    }
    if let Err(e) = fs::create_dir_all(out) {
        outcome.warnings.push(format!("{}: {e}", out.display()));
        return outcome;
    }
    let cells: Vec<CellOutcome> = manifests
        .iter()
        .map(|m| CellOutcome {
            variant: m.name.clone(),
            seed: m.seed,
            result: Ok(m.clone()),
        })
        .collect();
    let rows = aggregate(&cells);

    let mut md = String::from("# Run summary\n\n");
    if rows.is_empty() {
        md.push_str("No completed runs found.\n");
    } else {
        md.push_str(&format!("{} cells, {} variants, sorted by mean ATT.\n\n", cells.len(), rows.len()));
        md.push_str("| variant | seeds | ATT | throughput | TTC p10 | brakes/km | held-out acc |\n|---|---|---|---|---|---|---|\n");
        let pm = |s: &Summary, d: usize| {
            if s.mean.is_finite() {
                format!("{:.d$} ± {:.d$}", s.mean, s.std)
            } else {
                "n/a".into()
            }
        };
        for r in &rows {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                r.variant,
                r.seeds,
                pm(&r.att, 2),
                pm(&r.throughput, 1),
                pm(&r.ttc_p10, 3),
                pm(&r.brakes_per_km, 3),
                r.heldout_accuracy.as_ref().map(|a| pm(a, 3)).unwrap_or_else(|| "n/a".into())
            ));
        }
    }
    let mut files = vec![(out.join("aggregate.csv"), table_csv(&rows)), (out.join("summary.md"), md)];
    if manifests.iter().any(|m| m.metrics.is_some()) {
        files.push((out.join("pareto.svg"), pareto_svg(&manifests)));
    }
    for (path, text) in files {
        match fs::write(&path, text) {
            Ok(()) => outcome.files.push(path),
            Err(e) => outcome.warnings.push(format!("{}: {e}", path.display())),
        }
    }
    outcome
}

// ---------------------------------------------------------------- transfer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source: String,
    pub target: String,
    pub seed: u64,
    pub target_heldout: usize,
    pub zero_shot: OfflineEval,
    pub target_only: OfflineEval,
    /// `(lambda, eval)` for `lambda·source + (1-lambda)·target`.
    pub fused: Vec<(f64, OfflineEval)>,
    /// `(fraction, eval)` after appending that share of target pairs to the source data.
    pub few_shot: Vec<(f64, OfflineEval)>,
}

pub const FUSION_LAMBDAS: [f64; 3] = [0.0, 0.5, 1.0];
pub const FEW_SHOT_FRACTIONS: [f64; 2] = [0.01, 0.05];

/// Score the source scenario's reward model on the target scenario's
/// held-out pairs, alone, fused with the target model, and retrained with a
/// few target pairs appended.
pub fn run_transfer(ws: &Workspace, source: &ExperimentSpec, target: &ExperimentSpec, seed: u64) -> Result<TransferReport, HarnessError> {
    let mut prepared = Vec::new();
    for spec in [source, target] {
        let mut s = spec.clone();
        s.stages = vec![Stage::Collect, Stage::Label, Stage::TrainReward];
        s.variant.composition = Composition::Full;
        s.validate()?;
        let mut cell = Cell {
            ws,
            spec: &s,
            seed,
            keys: StageKeys::new(&s, seed)?,
            env: SimConfig { seed, ..s.sim_config()? },
            shaping: s.resolved_shaping(),
            log: Vec::new(),
        };
        let model_dir = cell.ensure(Stage::TrainReward, Stage::TrainReward)?;
        let label_dir = cell.dir(Stage::Label);
        let model = RewardModel::from_json(&read(&model_dir.join("model.json"))?)?;
        let split: Split = read_json(&model_dir.join("split.json"))?;
        let prefs = load_prefs(&label_dir)?;
        prepared.push((s.clone(), model, split, prefs));
    }
    let (src_spec, src_model, _, src_prefs) = prepared.remove(0);
    let (_, tgt_model, tgt_split, tgt_prefs) = prepared.remove(0);
    let heldout: Vec<LabeledPair> = tgt_split.heldout_idx.iter().map(|&i| tgt_prefs[i].clone()).collect();
    let eval = |s: &dyn reward_model::Scoring| reward_model::evaluate_offline(s, &heldout, None);

    let zero_shot = eval(&src_model)?;
    let target_only = eval(&tgt_model)?;
    let mut fused = Vec::new();
    for &l in &FUSION_LAMBDAS {
        let f = reward_model::fuse_scorers(src_model.clone(), tgt_model.clone(), l)?;
        fused.push((l, eval(&f)?));
    }
    let mut few_shot = Vec::new();
    for &frac in &FEW_SHOT_FRACTIONS {
        let n = ((tgt_split.train_idx.len() as f64 * frac).round() as usize).max(1);
        let mut data = src_prefs.clone();
        data.extend(tgt_split.train_idx.iter().take(n).map(|&i| tgt_prefs[i].clone()));
        let retrained = reward_model::train_reward_model(&data, &src_spec.resolved_reward(), seed)?;
        few_shot.push((frac, eval(&retrained.model)?));
    }
    let report = TransferReport {
        source: source.scenario.clone(),
        target: target.scenario.clone(),
        seed,
        target_heldout: heldout.len(),
        zero_shot,
        target_only,
        fused,
        few_shot,
    };
    let dir = ws.root.join("transfer").join(format!("{}-to-{}-seed-{seed}", source.name, target.name));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write(&dir.join("transfer.json"), &to_json(&report))?;
    Ok(report)
}

// ---------------------------------------------------------------- simulate

/// One episode under the fixed-time plan or a greedy policy, logged per
/// junction and step. Shaping records carry the external stream and mask.
pub fn simulate_episode(env: &SimConfig, policy: Option<&ActorCritic>, shaping: &ShapingConfig) -> Result<(Vec<EpisodeRecord>, EpisodeMetrics), HarnessError> {
    let probe = ShapingConfig {
        use_intrinsic: false,
        ..*shaping
    };
    let mut state = sim::init_network(env.clone())?;
    let mut obs = state.observe_all();
    let mut records = Vec::new();
    while !state.is_done() {
        let actions: Vec<Phase> = match policy {
            None => sim::fixed_time_actions(&state),
            Some(net) => {
                let mut a = Vec::with_capacity(obs.len());
                for (j, o) in obs.iter().enumerate() {
                    if !state.at_decision_point(j) {
                        a.push(state.current_phase(j));
                        continue;
                    }
                    let probs = net.distribution(&ppo::policy_features(o, env.green_s))?;
                    let best = (0..ppo::NUM_ACTIONS).max_by(|&x, &y| probs[x].total_cmp(&probs[y]).then(y.cmp(&x))).unwrap_or(0);
                    a.push(Phase::ALL[best]);
                }
                a
            }
        };
        let (next, events) = state.step(&actions);
        for (j, o) in next.iter().enumerate() {
            let mask = safety_mask(o, &probe);
            state.log_mut().record_mask(mask);
            let [r1, r2, r3] = mixed_streams(external_reward_tl(o, probe.lambda_delay), 0.0, mask, 0.0, &probe);
            records.push(EpisodeRecord::Step(StepRecord {
                observation: o.clone(),
                action: actions[j],
                events: events.junctions[j].into(),
            }));
            records.push(EpisodeRecord::Shaping(ShapingRecord {
                t: o.time,
                intersection: j,
                r1,
                r2,
                r3,
                mask,
                lambda: 0.0,
            }));
        }
        obs = next;
    }
    let metrics = state.metrics();
    Ok((records, metrics))
}

