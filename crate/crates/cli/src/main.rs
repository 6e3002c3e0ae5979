use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trafficpref::harness::{self, CellOutcome, ExperimentSpec, JudgeSpec, Matrix, Stage, VariantRow, Workspace};
use trafficpref::jsonl;
use trafficpref::ppo::ActorCritic;
use trafficpref::sim::SimConfig;

#[derive(Parser)]
#[command(name = "trafficpref", version, about = "Preference-shaped signal control experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed, comma list or inclusive range such as 1-5.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Artifact root.
    #[arg(long, global = true, default_value = "artifacts")]
    out: PathBuf,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// synthetic:<profile> | noisy:<p_flip>[:<p_abstain>] | http:<url>
    #[arg(long, global = true)]
    judge: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode per seed and write the step log and metrics.
    Simulate {
        /// Greedy policy checkpoint; the fixed-time plan when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Stage 1: roll out behaviour policies and caption the observation pool.
    Collect(StageArgs),
    /// Stage 2a: sample pairs and query the judge.
    Label(StageArgs),
    /// Stage 2b: fit the Bradley-Terry reward model.
    TrainReward(StageArgs),
    /// Stage 3: train the PPO signal policy.
    TrainPolicy(StageArgs),
    /// Greedy evaluation of the trained policy.
    Evaluate(StageArgs),
    /// Run an ablation matrix (A1 A2 A3 B1 B2 C2 D1 D2) over the spec's seeds.
    Ablate { matrix: String },
    /// Score one scenario's reward model on another scenario's labels.
    Transfer {
        /// Target scenario id, e.g. grid3x3-surge.
        #[arg(long)]
        target: String,
    },
    /// Summarise finished runs found under the given directories into --out.
    Report { dirs: Vec<PathBuf> },
}

#[derive(Args)]
struct StageArgs {
    /// Also run every upstream stage that is not cached yet.
    #[arg(long)]
    through: bool,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
                if a > b {
                    bail!("empty seed range {part}");
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().with_context(|| format!("bad seed {part:?}"))?),
        }
    }
    if seeds.is_empty() {
        bail!("no seeds in {s:?}");
    }
    Ok(seeds)
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(s) = &common.seed {
        spec.seeds = parse_seeds(s)?;
    }
    if let Some(j) = &common.judge {
        spec.variant.judge = j.parse::<JudgeSpec>()?;
    }
    spec.validate()?;
    Ok(spec)
}

fn workers(common: &Common) -> usize {
    common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

fn print_cells(cells: &[CellOutcome]) {
    for c in cells {
        match &c.result {
            Ok(m) => {
                for s in &m.stages {
                    let how = if s.cached { "cache hit" } else { "computed" };
                    eprintln!("{} seed {}: {} {how} ({})", c.variant, c.seed, s.stage, s.key);
                }
            }
            Err(e) => eprintln!("{} seed {}: FAILED: {e}", c.variant, c.seed),
        }
    }
}

fn print_rows(rows: &[VariantRow]) {
    print!("{}", harness::table_csv(rows));
}

fn run_stage(common: &Common, stage: Stage, args: &StageArgs) -> Result<ExitCode> {
    let mut spec = load_spec(common)?;
    spec.stages = if args.through {
        Stage::ALL.into_iter().filter(|&s| s <= stage).collect()
    } else {
        vec![stage]
    };
    if !spec.needs_scorer() && stage <= Stage::TrainReward {
        eprintln!("{}: composition {} uses no learned reward; nothing to do", spec.name, spec.variant.composition.name());
        return Ok(ExitCode::SUCCESS);
    }
    let ws = Workspace::new(&common.out);
    let out = harness::run_pipeline(&ws, &spec, workers(common))?;
    print_cells(&out.cells);
    if stage == Stage::Evaluate {
        print_rows(&out.rows);
    }
    eprintln!("artifacts in {}", out.dir.display());
    Ok(if out.failures() == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn simulate(common: &Common, policy: Option<&Path>) -> Result<ExitCode> {
    let spec = load_spec(common)?;
    let net = match policy {
        Some(p) => Some(ActorCritic::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };
    let dir = common.out.join("simulate").join(&spec.name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut all = Vec::new();
    for &seed in &spec.seeds {
        let env = SimConfig {
            seed,
            ..spec.sim_config()?
        };
        let (records, metrics) = harness::simulate_episode(&env, net.as_ref(), &spec.resolved_shaping())?;
        let log = dir.join(format!("episode-seed-{seed}.jsonl"));
        fs::write(&log, jsonl::to_string(&records)).with_context(|| format!("writing {}", log.display()))?;
        all.push(metrics);
    }
    let csv = harness::metrics_csv(&spec.seeds, &all);
    fs::write(dir.join("metrics.csv"), &csv)?;
    print!("{csv}");
    eprintln!("episode logs in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn ablate(common: &Common, matrix: &str) -> Result<ExitCode> {
    let matrix: Matrix = matrix.parse()?;
    let spec = load_spec(common)?;
    let ws = Workspace::new(&common.out);
    let out = harness::run_ablation(&ws, matrix, &spec, workers(common))?;
    print_cells(&out.cells);
    print_rows(&out.rows);
    for r in &out.d1 {
        println!("# M={} heldout_accuracy={:.4} att={:.2}", r.pair_budget, r.heldout_accuracy, r.att);
    }
    if let Some(d2) = &out.d2 {
        println!("# D2 relative ATT spread {:.4}", d2.spread);
    }
    let failed = out.failures();
    eprintln!("table in {}", out.dir.display());
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", out.cells.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn transfer(common: &Common, target: &str) -> Result<ExitCode> {
    let source = load_spec(common)?;
    let mut tgt = source.clone();
    tgt.scenario = target.to_string();
    tgt.name = format!("{}-target", source.name);
    tgt.validate()?;
    let ws = Workspace::new(&common.out);
    println!("seed,evaluation,pairwise_accuracy,auc");
    for &seed in &source.seeds {
        let r = harness::run_transfer(&ws, &source, &tgt, seed)?;
        println!("{seed},zero_shot,{},{}", r.zero_shot.pairwise_accuracy, r.zero_shot.auc);
        println!("{seed},target_only,{},{}", r.target_only.pairwise_accuracy, r.target_only.auc);
        for (l, e) in &r.fused {
            println!("{seed},fused_lambda_{l},{},{}", e.pairwise_accuracy, e.auc);
        }
        for (f, e) in &r.few_shot {
            println!("{seed},few_shot_{f},{},{}", e.pairwise_accuracy, e.auc);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn report(common: &Common, dirs: &[PathBuf]) -> ExitCode {
    let out = harness::report(dirs, &common.out);
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    for f in &out.files {
        eprintln!("wrote {}", f.display());
    }
    eprintln!("{} cells summarised", out.cells);
    ExitCode::SUCCESS
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let c = &cli.common;
    match &cli.command {
        Command::Simulate { policy } => simulate(c, policy.as_deref()),
        Command::Collect(a) => run_stage(c, Stage::Collect, a),
        Command::Label(a) => run_stage(c, Stage::Label, a),
        Command::TrainReward(a) => run_stage(c, Stage::TrainReward, a),
        Command::TrainPolicy(a) => run_stage(c, Stage::TrainPolicy, a),
        Command::Evaluate(a) => run_stage(c, Stage::Evaluate, a),
        Command::Ablate { matrix } => ablate(c, matrix),
        Command::Transfer { target } => transfer(c, target),
        Command::Report { dirs } => Ok(report(c, dirs)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("3").unwrap(), vec![3]);
        assert_eq!(parse_seeds("1,4, 2").unwrap(), vec![1, 4, 2]);
        assert_eq!(parse_seeds("1-3,9").unwrap(), vec![1, 2, 3, 9]);
        assert!(parse_seeds("5-1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }
}
