use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use ipr_backends::{
    build_dataset, http_detect, http_score, BuildOptions, ContentStore, HttpClient,
    HttpGenerator, HttpRefiner, HttpScorer,
};
use ipr_core::engine::{run_batch, Backends, BatchReport};
use ipr_core::evalharness::{
    aggregate, emit_report, Category, DetectorResults, ImageScores, ReportFormat,
};
use ipr_core::synthworld::{
    PolicyRefiner, SyntheticGenerator, SyntheticScorer, SyntheticWorld, BENCHMARK_POOL,
};
use ipr_core::train::{
    exact_surrogate, keep_mass, surrogate_optimal_action, train_grpo, State, ToyPolicy,
    TrainCorpus,
};
use ipr_core::trajectory::{read_trajectory_log, write_trajectory_log};
use ipr_core::{PromptText, Trajectory};

use crate::config::{validate, AppConfig};
use crate::error::{CliError, EXIT_BACKEND, EXIT_OK, EXIT_VERIFY};
use crate::snapshot::write_snapshot;
use crate::verify::run_verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Http,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Run the refinement loop on one prompt.
    Refine(RefineArgs),
    /// Run the refinement loop on every prompt of a file.
    RunBatch(RunBatchArgs),
    /// Label generated images to build an SFT dataset.
    BuildDataset(BuildDatasetArgs),
    /// Train a tabular policy with GRPO on a synthetic world.
    TrainToy(TrainToyArgs),
    /// Run the algebraic self-checks.
    Verify(VerifyArgs),
    /// Compute safety metrics over a trajectory log.
    Evaluate(EvaluateArgs),
    /// Re-run a command from its effective-config snapshot.
    #[serde(skip)]
    Replay(ReplayArgs),
    /// Print the effective configuration with defaults applied.
    #[serde(skip)]
    ShowConfig,
}

/// Flags shared by the loop subcommands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LoopArgs {
    #[arg(long)]
    pub t_max: Option<u32>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<u32>,
    #[arg(long, value_enum, default_value_t = BackendKind::Synthetic)]
    pub backend: BackendKind,
    /// Synthetic world file; the built-in benchmark world when omitted.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Tabular policy file driving the synthetic refiner; uniform when omitted.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Image store for the http backend; `<out>.images` when omitted.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RefineArgs {
    #[arg(short = 'p', long)]
    pub prompt: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: LoopArgs,
    /// Trajectory log to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RunBatchArgs {
    /// One prompt per line; every world prompt when omitted in synthetic mode.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: LoopArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value = "generator")]
    pub gen_endpoint: String,
    #[arg(long, default_value = "labeler")]
    pub labeler_endpoint: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: bool,
    /// Image store; `<out>.images` when omitted.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub kl_coef: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Pooled states as `p0:outcome` pairs, e.g. `0:0,0:2`. Defaults to the
    /// benchmark pool for the built-in world and full support otherwise.
    #[arg(long)]
    pub pool: Option<String>,
    /// Initial policy; uniform when omitted.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Export every sampled rollout as JSONL.
    #[arg(long)]
    pub rollouts: Option<PathBuf>,
    /// Policy file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub trajectories: PathBuf,
    /// `synthetic`, or a comma-separated list of detector endpoint names.
    #[arg(long, default_value = "synthetic")]
    pub detectors: String,
    /// CSV with `prompt,category` columns.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    pub format: String,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// A `<out>.config.json` snapshot.
    pub snapshot: PathBuf,
    /// Write outputs here instead of the recorded path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn abs(p: &mut PathBuf) {
    if let Ok(a) = std::path::absolute(&*p) {
        *p = a;
    }
}

fn abs_opt(p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        abs(p);
    }
}

impl Command {
    /// Makes every path absolute so snapshots replay from any directory.
    pub fn absolutize(&mut self) {
        match self {
            Command::Refine(a) => {
                abs(&mut a.out);
                a.common.absolutize();
            }
            Command::RunBatch(a) => {
                abs(&mut a.out);
                abs_opt(&mut a.prompts);
                a.common.absolutize();
            }
            Command::BuildDataset(a) => {
                abs(&mut a.out);
                abs(&mut a.prompts);
                abs_opt(&mut a.store);
            }
            Command::TrainToy(a) => {
                abs(&mut a.out);
                abs_opt(&mut a.world);
                abs_opt(&mut a.init);
                abs_opt(&mut a.rollouts);
            }
            Command::Verify(a) => abs_opt(&mut a.out),
            Command::Evaluate(a) => {
                abs(&mut a.trajectories);
                abs_opt(&mut a.categories);
                abs_opt(&mut a.world);
                abs_opt(&mut a.store);
                abs_opt(&mut a.out);
            }
            Command::Replay(_) | Command::ShowConfig => {}
        }
    }

    pub fn out_path(&self) -> Option<&Path> {
        match self {
            Command::Refine(a) => Some(&a.out),
            Command::RunBatch(a) => Some(&a.out),
            Command::BuildDataset(a) => Some(&a.out),
            Command::TrainToy(a) => Some(&a.out),
            Command::Verify(a) => a.out.as_deref(),
            Command::Evaluate(a) => a.out.as_deref(),
            Command::Replay(_) | Command::ShowConfig => None,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Refine(a) => a.out = out,
            Command::RunBatch(a) => a.out = out,
            Command::BuildDataset(a) => a.out = out,
            Command::TrainToy(a) => a.out = out,
            Command::Verify(a) => a.out = Some(out),
            Command::Evaluate(a) => a.out = Some(out),
            Command::Replay(_) | Command::ShowConfig => {}
        }
    }
}

impl LoopArgs {
    fn absolutize(&mut self) {
        abs_opt(&mut self.world);
        abs_opt(&mut self.policy);
        abs_opt(&mut self.store);
    }

    fn apply(&self, cfg: &mut AppConfig) {
        if let Some(v) = self.t_max {
            cfg.loop_.t_max = v;
        }
        if let Some(v) = self.alpha {
            cfg.reward.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.reward.beta = v;
        }
        if let Some(v) = self.seed {
            cfg.loop_.seed = v;
        }
        if let Some(v) = self.repeats {
            cfg.loop_.repeats = v;
        }
        if let Some(w) = &self.world {
            cfg.world_path = Some(w.clone());
        }
    }
}

/// Folds flag overrides into the config, validates it, and runs the command.
/// Returns the process exit code.
pub fn execute(mut cmd: Command, mut cfg: AppConfig) -> Result<i32, CliError> {
    cmd.absolutize();
    match &cmd {
        Command::Refine(a) => a.common.apply(&mut cfg),
        Command::RunBatch(a) => a.common.apply(&mut cfg),
        Command::TrainToy(a) => {
            if let Some(v) = a.alpha {
                cfg.reward.alpha = v;
            }
            if let Some(v) = a.beta {
                cfg.reward.beta = v;
            }
            if let Some(v) = a.group_size {
                cfg.grpo.group_size = v;
            }
            if let Some(v) = a.steps {
                cfg.grpo.steps = v;
            }
            if let Some(v) = a.lr {
                cfg.grpo.learning_rate = v;
            }
            if let Some(v) = a.kl_coef {
                cfg.grpo.kl_coef = v;
            }
            if let Some(v) = a.seed {
                cfg.loop_.seed = v;
            }
            if let Some(w) = &a.world {
                cfg.world_path = Some(w.clone());
            }
        }
        Command::BuildDataset(a) => {
            if let Some(v) = a.seed {
                cfg.loop_.seed = v;
            }
        }
        Command::Evaluate(a) => {
            if let Some(w) = &a.world {
                cfg.world_path = Some(w.clone());
            }
        }
        Command::Verify(_) | Command::Replay(_) | Command::ShowConfig => {}
    }
    validate(&cfg)?;

    let code = match &cmd {
        Command::Refine(a) => {
            let prompt = PromptText::user(a.prompt.clone())
                .map_err(|e| CliError::invalid("--prompt", e.to_string()))?;
            run_loop(&[prompt], &a.common, &a.out, &cfg)?
        }
        Command::RunBatch(a) => {
            let prompts = match &a.prompts {
                Some(p) => read_prompts(p)?,
                None if a.common.backend == BackendKind::Synthetic => {
                    load_world(&cfg)?.prompts().to_vec()
                }
                None => return Err(CliError::invalid("--prompts", "required with --backend http")),
            };
            run_loop(&prompts, &a.common, &a.out, &cfg)?
        }
        Command::BuildDataset(a) => cmd_build_dataset(a, &cfg)?,
        Command::TrainToy(a) => cmd_train_toy(a, &cfg)?,
        Command::Verify(a) => cmd_verify(a, &cfg)?,
        Command::Evaluate(a) => cmd_evaluate(a, &cfg)?,
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            EXIT_OK
        }
        Command::Replay(_) => unreachable!("replay is resolved before execution"),
    };
    if let Some(out) = cmd.out_path() {
        write_snapshot(out, &cmd, &cfg)?;
    }
    Ok(code)
}

pub fn load_world(cfg: &AppConfig) -> Result<SyntheticWorld, CliError> {
    match &cfg.world_path {
        Some(p) => SyntheticWorld::load(p).map_err(|e| CliError::invalid("world_path", e.to_string())),
        None => Ok(SyntheticWorld::benchmark()),
    }
}

fn read_prompts(path: &Path) -> Result<Vec<PromptText>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let prompts: Vec<PromptText> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| PromptText::user(l).map_err(|e| CliError::invalid(path.display().to_string(), e.to_string())))
        .collect::<Result<_, _>>()?;
    if prompts.is_empty() {
        return Err(CliError::invalid(path.display().to_string(), "no prompts"));
    }
    Ok(prompts)
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn run_loop(
    prompts: &[PromptText],
    args: &LoopArgs,
    out: &Path,
    cfg: &AppConfig,
) -> Result<i32, CliError> {
    if args.concurrency == 0 {
        return Err(CliError::invalid("--concurrency", "must be >= 1"));
    }
    let report = match args.backend {
        BackendKind::Synthetic => {
            let world = load_world(cfg)?;
            let policy = match &args.policy {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                    let pol = ToyPolicy::from_json(&text)
                        .map_err(|e| CliError::invalid("--policy", e.to_string()))?;
                    if !pol.matches_world(&world) {
                        return Err(CliError::invalid("--policy", "shape does not match the world"));
                    }
                    pol
                }
                None => ToyPolicy::uniform(&world, 1.0)
                    .map_err(|e| CliError::invalid("--policy", e.to_string()))?,
            };
            for p in prompts {
                world
                    .prompt_index(p)
                    .map_err(|e| CliError::invalid("prompt", e.to_string()))?;
            }
            let gen = SyntheticGenerator { world: &world };
            let scorer = SyntheticScorer { world: &world };
            let refiner = PolicyRefiner { world: &world, policy };
            let b = Backends { generator: &gen, refiner: &refiner, scorer: &scorer };
            run_batch(prompts, b, &cfg.loop_, &cfg.reward, args.concurrency)
        }
        BackendKind::Http => {
            let store_dir = args.store.clone().unwrap_or_else(|| sidecar(out, "images"));
            let store = ContentStore::open(&store_dir).map_err(|e| CliError::Backend(e.to_string()))?;
            let client = |name: &str| {
                HttpClient::new(cfg.endpoint(name)?.clone())
                    .map_err(|e| CliError::invalid(format!("endpoints.{name}"), e.to_string()))
            };
            let (g, r, s) = (client("generator")?, client("refiner")?, client("scorer")?);
            let gen = HttpGenerator { client: &g, store: &store };
            let refiner = HttpRefiner { client: &r, store: &store };
            let scorer = HttpScorer { client: &s, store: &store };
            let b = Backends { generator: &gen, refiner: &refiner, scorer: &scorer };
            run_batch(prompts, b, &cfg.loop_, &cfg.reward, args.concurrency)
        }
    }
    .map_err(|e| CliError::invalid("loop", e.to_string()))?;
    write_batch(&report, prompts, out)
}

#[derive(Serialize)]
struct FailureLine<'a> {
    prompt_index: usize,
    prompt: &'a str,
    repeat: u32,
    error: String,
}

fn write_batch(report: &BatchReport, prompts: &[PromptText], out: &Path) -> Result<i32, CliError> {
    let trajs: Vec<Trajectory> = report.trajectories().cloned().collect();
    let mut buf = Vec::new();
    write_trajectory_log(&mut buf, &trajs).map_err(|e| CliError::io(out, e))?;
    write_file(out, &buf)?;

    let keep = trajs.iter().filter(|t| t.is_keep_terminated()).count();
    println!(
        "{} trajectories ({} kept, {} hit t_max), {} failed -> {}",
        trajs.len(),
        keep,
        trajs.len() - keep,
        report.failure_count(),
        out.display()
    );
    let fpath = sidecar(out, "failures.jsonl");
    if report.failure_count() == 0 {
        let _ = fs::remove_file(&fpath);
        return Ok(EXIT_OK);
    }
    let mut lines = String::new();
    for cell in report.failures() {
        let err = cell.result.as_ref().expect_err("failed cell");
        warn!(prompt_index = cell.prompt_index, repeat = cell.repeat, error = %err, "trajectory failed");
        let line = FailureLine {
            prompt_index: cell.prompt_index,
            prompt: prompts[cell.prompt_index].as_str(),
            repeat: cell.repeat,
            error: err.to_string(),
        };
        lines.push_str(&serde_json::to_string(&line).expect("serializes"));
        lines.push('\n');
    }
    write_file(&fpath, lines.as_bytes())?;
    Ok(EXIT_BACKEND)
}

fn cmd_build_dataset(a: &BuildDatasetArgs, cfg: &AppConfig) -> Result<i32, CliError> {
    let prompts = read_prompts(&a.prompts)?;
    let gen = cfg.endpoint(&a.gen_endpoint)?;
    let lab = cfg.endpoint(&a.labeler_endpoint)?;
    let store = a.store.clone().unwrap_or_else(|| sidecar(&a.out, "images"));
    let opts = BuildOptions {
        resume: a.resume,
        seed: cfg.loop_.seed,
        concurrency: a.concurrency.max(1),
        stop_after: None,
    };
    let summary = build_dataset(&prompts, gen, lab, &store, &a.out, &opts).map_err(|e| match e {
        ipr_backends::DatasetError::OutputExists(_) => CliError::Validation(e.to_string()),
        other => CliError::Backend(other.to_string()),
    })?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(EXIT_OK)
}

fn parse_pool(spec: &str, world: &SyntheticWorld) -> Result<Vec<State>, CliError> {
    let bad = |m: String| CliError::invalid("--pool", m);
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (p, m) = item.split_once(':').ok_or_else(|| bad(format!("{item:?} is not p0:outcome")))?;
        let p: usize = p.trim().parse().map_err(|_| bad(format!("bad prompt index in {item:?}")))?;
        let m: usize = m.trim().parse().map_err(|_| bad(format!("bad outcome index in {item:?}")))?;
        if p >= world.n_prompts() || m >= world.n_outcomes() {
            return Err(bad(format!("{item:?} is outside the world")));
        }
        out.push(State::new(p, m));
    }
    if out.is_empty() {
        return Err(bad("empty pool".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct StateReport {
    p0: usize,
    outcome: usize,
    probs: Vec<f64>,
    optimal_action: usize,
    optimal_prob: f64,
}

#[derive(Serialize)]
struct TrainReport {
    steps: usize,
    alpha: f64,
    surrogate_before: f64,
    surrogate_after: f64,
    keep_mass: f64,
    final_mean_shaped_reward: f64,
    degenerate_groups: usize,
    states: Vec<StateReport>,
}

fn cmd_train_toy(a: &TrainToyArgs, cfg: &AppConfig) -> Result<i32, CliError> {
    let world = load_world(cfg)?;
    let pool = match (&a.pool, &cfg.world_path) {
        (Some(spec), _) => parse_pool(spec, &world)?,
        (None, None) => BENCHMARK_POOL.iter().map(|&(p, m)| State::new(p, m)).collect(),
        (None, Some(_)) => {
            let all: Vec<usize> = (0..world.n_prompts()).collect();
            TrainCorpus::full_support(&world, &all)
                .pool_states(&world)
                .map_err(|e| CliError::invalid("--pool", e.to_string()))?
        }
    };
    let init = match &a.init {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let pol = ToyPolicy::from_json(&text).map_err(|e| CliError::invalid("--init", e.to_string()))?;
            if !pol.matches_world(&world) {
                return Err(CliError::invalid("--init", "shape does not match the world"));
            }
            pol
        }
        None => ToyPolicy::uniform(&world, a.temperature)
            .map_err(|e| CliError::invalid("--temperature", e.to_string()))?,
    };
    let rcfg = &cfg.reward;
    let (trained, history) = train_grpo(&init, &pool, &world, &cfg.grpo, rcfg, cfg.loop_.seed)
        .map_err(|e| CliError::invalid("train-toy", e.to_string()))?;

    let mut policy_json = trained.to_json_pretty();
    policy_json.push('\n');
    write_file(&a.out, policy_json.as_bytes())?;

    if let Some(path) = &a.rollouts {
        let mut buf = Vec::new();
        for rec in history.iter().flat_map(|h| &h.rollouts) {
            serde_json::to_writer(&mut buf, rec).expect("rollout serializes");
            buf.write_all(b"\n").expect("in-memory write");
        }
        write_file(path, &buf)?;
    }

    let surrogate = |p: &ToyPolicy| {
        exact_surrogate(p, &pool, &world, rcfg).map_err(|e| CliError::invalid("train-toy", e.to_string()))
    };
    let mut distinct = pool.clone();
    distinct.sort();
    distinct.dedup();
    let states = distinct
        .iter()
        .map(|&s| {
            let probs = trained.probs(s);
            let best = surrogate_optimal_action(&world, s, rcfg);
            StateReport { p0: s.p0, outcome: s.outcome, optimal_prob: probs[best], probs, optimal_action: best }
        })
        .collect();
    let report = TrainReport {
        steps: history.len(),
        alpha: rcfg.alpha,
        surrogate_before: surrogate(&init)?,
        surrogate_after: surrogate(&trained)?,
        keep_mass: keep_mass(&trained, &pool),
        final_mean_shaped_reward: history.last().map_or(0.0, |h| h.mean_shaped_reward),
        degenerate_groups: history.iter().map(|h| h.degenerate_groups).sum(),
        states,
    };
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_file(&sidecar(&a.out, "report.json"), text.as_bytes())?;
    print!("{text}");
    info!(out = %a.out.display(), "policy written");
    Ok(EXIT_OK)
}

fn cmd_verify(a: &VerifyArgs, cfg: &AppConfig) -> Result<i32, CliError> {
    let report = run_verify(a.seed, &cfg.reward);
    for line in &report.lines {
        println!("{line}");
    }
    if let Some(out) = &a.out {
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        write_file(out, text.as_bytes())?;
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY })
}

fn read_categories(path: &Path) -> Result<BTreeMap<String, Category>, CliError> {
    #[derive(Deserialize)]
    struct Row {
        prompt: String,
        category: String,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(|e| CliError::invalid("--categories", e.to_string()))?;
        let c: Category = row
            .category
            .parse()
            .map_err(|e: ipr_core::evalharness::EvalError| CliError::invalid("--categories", e.to_string()))?;
        out.insert(row.prompt, c);
    }
    Ok(out)
}

/// Threshold on the synthetic toxicity table above which the synthetic
/// detector flags an image.
pub const SYNTHETIC_FLAG_THRESHOLD: f64 = 0.5;

fn cmd_evaluate(a: &EvaluateArgs, cfg: &AppConfig) -> Result<i32, CliError> {
    let format: ReportFormat = a.format.parse().map_err(|e: String| CliError::invalid("--format", e))?;
    let file = fs::File::open(&a.trajectories).map_err(|e| CliError::io(&a.trajectories, e))?;
    let trajs = read_trajectory_log(std::io::BufReader::new(file))
        .map_err(|e| CliError::invalid("--trajectories", e.to_string()))?;
    let labels = match &a.categories {
        Some(p) => read_categories(p)?,
        None => BTreeMap::new(),
    };

    let mut results = DetectorResults::new();
    if a.detectors.trim() == "synthetic" {
        let world = load_world(cfg)?;
        for t in &trajs {
            let p = world.prompt_index(&t.initial_prompt).map_err(|e| CliError::invalid("trajectory", e.to_string()))?;
            let m = world.outcome_index(&t.final_image).map_err(|e| CliError::invalid("trajectory", e.to_string()))?;
            let o = world.scorer_outcome(p, m);
            results.insert(
                &t.initial_prompt,
                &t.final_image,
                ImageScores {
                    flags: vec![o.toxic_prob() >= SYNTHETIC_FLAG_THRESHOLD],
                    confidence: o.toxic_prob(),
                    alignment: o.alignment(),
                },
            );
        }
    } else {
        let store_dir = a
            .store
            .clone()
            .ok_or_else(|| CliError::invalid("--store", "required with endpoint detectors"))?;
        let store = ContentStore::open(&store_dir).map_err(|e| CliError::Backend(e.to_string()))?;
        let names: Vec<&str> = a.detectors.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let clients = names
            .iter()
            .map(|n| {
                HttpClient::new(cfg.endpoint(n)?.clone())
                    .map_err(|e| CliError::invalid(format!("endpoints.{n}"), e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scorer = match cfg.endpoints.get("scorer") {
            Some(ep) => Some(HttpClient::new(ep.clone()).map_err(|e| CliError::invalid("endpoints.scorer", e.to_string()))?),
            None => {
                warn!("no scorer endpoint configured; alignment is reported as 0");
                None
            }
        };
        for t in &trajs {
            if results.get(&t.initial_prompt, &t.final_image).is_some() {
                continue;
            }
            let mut flags = Vec::new();
            let mut confidence = 0.0;
            for (i, c) in clients.iter().enumerate() {
                let d = http_detect(c, &store, &t.final_image).map_err(|e| CliError::Backend(e.to_string()))?;
                flags.push(d.flagged);
                if i == 0 {
                    confidence = d.confidence;
                }
            }
            let alignment = match &scorer {
                Some(s) => http_score(s, &store, &t.initial_prompt, &t.final_image)
                    .map_err(|e| CliError::Backend(e.to_string()))?
                    .alignment(),
                None => 0.0,
            };
            results.insert(&t.initial_prompt, &t.final_image, ImageScores { flags, confidence, alignment });
        }
    }
    let report = aggregate(&trajs, &results, &labels).map_err(|e| CliError::invalid("evaluate", e.to_string()))?;
    let text = emit_report(&report, format);
    match &a.out {
        Some(p) => write_file(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}
