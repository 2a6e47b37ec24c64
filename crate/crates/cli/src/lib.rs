//! The `alphagrpo` command line.
//!
//! Every subcommand resolves a flat config (file plus flag overrides), writes
//! its outputs under one directory and finishes with `manifest.json`.
//! Exit codes: 0 success, 2 config error, 3 missing input, 4 numerical
//! failure, 1 anything else.

pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use alphagrpo::config::{Config, ConfigError, RunConfig};
use alphagrpo::dvreward::{self, AnalyticVerifier, Category, Filtered, QuestionSet};
use alphagrpo::envtoy::{self, Catalog, PromptSpec};
use alphagrpo::gradcore::{Checkpoint, OptimizerState, ParamVector};
use alphagrpo::grpotrain::{self, EvalReport, StepMetrics, TrainError};
use alphagrpo::model::{self, ModelSpec, PolicyModel};
use alphagrpo::rewardserve::{self, RewardClient, SchedulePolicy, ScheduleScenario};
use alphagrpo_serve::{Backend, HttpScorer, RemoteLogprobVerifier, ServeConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const OUT_ENV: &str = "ALPHAGRPO_OUT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Missing(m) => CliError::Missing(m),
            e @ TrainError::Numerical { .. } => CliError::Numerical(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Missing(path.display().to_string())
    } else {
        CliError::Other(format!("{}: {e}", path.display()))
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Rt2i,
    Srr,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RewardArg {
    Confidence,
    Binary,
    Holistic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "alphagrpo", version, about = "GRPO over hybrid reasoning/flow trajectories with decomposed verifiable rewards")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (for gen-data: the prompt seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$ALPHAGRPO_OUT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Optimizer steps (train) or simulated steps (simulate).
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    pub reward: Option<RewardArg>,
    #[arg(long, global = true, value_enum)]
    pub fpr: Option<Switch>,
    /// `analytic` or `remote:URL`.
    #[arg(long, global = true, default_value = "analytic")]
    pub verifier: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training and held-out prompts with their question sets.
    GenData {
        /// Print per-category question counts.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Flow-matching and reasoning-format warm start.
    Pretrain {
        /// Directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// GRPO training in rt2i or srr mode.
    Train {
        /// Directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Starting checkpoint; a fresh initialization when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out prompts.
    Eval {
        /// Directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also refine each sample once and report the improvement rate.
        #[arg(long)]
        srr: bool,
    },
    /// Run the HTTP verification service until Ctrl-C.
    Serve {
        /// Listen address; overrides `serve.addr`.
        #[arg(long)]
        addr: Option<SocketAddr>,
    },
    /// Reward-waiting bubble simulation for all scheduling policies.
    Simulate,
    /// Render curves and tables from finished runs.
    Report {
        /// Training run directories (holding metrics.jsonl).
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        /// Eval report files (eval.json).
        #[arg(long)]
        eval: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Serve { .. } => "serve",
            Command::Simulate => "simulate",
            Command::Report { .. } => "report",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Canonical `key=value` lines of the effective config.
    pub config: String,
    pub config_hash: String,
    pub resolved: RunConfig,
    pub seed: u64,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub code_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temp file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

struct Run {
    name: &'static str,
    args: Vec<String>,
    cfg: Config,
    run: RunConfig,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started: f64,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        write_atomic(&path, bytes)?;
        if !self.outputs.contains(&path) {
            self.outputs.push(path.clone());
        }
        Ok(path)
    }

    fn finish(self) -> Result<RunManifest> {
        let outputs: Vec<String> = self.outputs.iter().map(|p| p.display().to_string()).collect();
        if let Some(p) = self.outputs.iter().find(|p| !p.exists()) {
            return Err(CliError::Other(format!("listed output {} does not exist", p.display())));
        }
        let m = RunManifest {
            command: self.name.to_string(),
            args: self.args,
            config: self.cfg.canonical(),
            config_hash: self.cfg.hash(),
            seed: self.run.seed,
            resolved: self.run,
            inputs: self.inputs,
            outputs,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: now(),
        };
        let json = serde_json::to_vec_pretty(&m).map_err(|e| CliError::Other(e.to_string()))?;
        write_atomic(&self.out.join(MANIFEST), &json)?;
        Ok(m)
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn effective_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        let key = if matches!(cli.command, Command::GenData { .. }) { "data.seed" } else { "seed" };
        cfg.set(key, s)?;
    }
    if let Some(n) = cli.steps {
        let key = if matches!(cli.command, Command::Simulate) { "sim.steps" } else { "grpo.steps" };
        cfg.set(key, n)?;
    }
    if let Some(m) = cli.mode {
        cfg.set("grpo.mode", match m { ModeArg::Rt2i => "rt2i", ModeArg::Srr => "srr" })?;
    }
    if let Some(r) = cli.reward {
        let v = match r {
            RewardArg::Confidence => "confidence",
            RewardArg::Binary => "binary",
            RewardArg::Holistic => "holistic",
        };
        cfg.set("grpo.reward", v)?;
    }
    if let Some(f) = cli.fpr {
        cfg.set("grpo.fpr", match f { Switch::On => "on", Switch::Off => "off" })?;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerifierSpec {
    Analytic,
    Remote(String),
}

pub fn parse_verifier(s: &str) -> Result<VerifierSpec> {
    match s {
        "analytic" => Ok(VerifierSpec::Analytic),
        _ => match s.strip_prefix("remote:") {
            Some(url) if !url.is_empty() => Ok(VerifierSpec::Remote(url.to_string())),
            _ => Err(CliError::Config(format!("--verifier must be `analytic` or `remote:URL`, got `{s}`"))),
        },
    }
}

fn reward_client(spec: &VerifierSpec, run: &RunConfig) -> Result<RewardClient> {
    Ok(match spec {
        VerifierSpec::Analytic => {
            RewardClient::local(AnalyticVerifier { temperature: run.train.verifier_temperature }, run.verifier_workers)
        }
        VerifierSpec::Remote(url) => {
            let scorer = HttpScorer::new(url.clone(), Duration::from_secs(120)).map_err(|e| CliError::Other(e.to_string()))?;
            RewardClient::new(Arc::new(scorer), run.verifier_workers, 1 << 16)
        }
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).map_err(|e| CliError::Other(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &Path) -> Result<Vec<T>> {
    BufReader::new(bytes)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l.map_err(|e| CliError::Other(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| CliError::Other(format!("{}: {e}", what.display())))
        })
        .collect()
}

fn catalog(run: &RunConfig) -> Result<Catalog> {
    Catalog::standard(run.data.tasks, run.data.dim).map_err(|e| CliError::Config(e.to_string()))
}

fn model_spec(run: &RunConfig) -> Result<ModelSpec> {
    let cat = catalog(run)?;
    Ok(ModelSpec { max_len: run.model.max_len, ar_hidden: run.model.ar_hidden, flow_hidden: run.model.flow_hidden, ..ModelSpec::for_catalog(&cat) })
}

fn checkpoint_bytes(spec: &ModelSpec, params: &ParamVector, opt: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    Checkpoint::new(spec.clone(), params.clone(), opt.cloned())
        .write(&mut out)
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(out)
}

fn load_checkpoint(run: &mut Run, path: &Path) -> Result<Checkpoint<ModelSpec>> {
    let bytes = run.read(path)?;
    Checkpoint::read(bytes.as_slice()).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

struct Data {
    prompts: Vec<PromptSpec>,
    questions: Vec<QuestionSet>,
}

fn load_data(run: &mut Run, dir: &Path, held_out: bool) -> Result<Data> {
    let (p, q) = if held_out { ("eval_prompts.jsonl", "eval_questions.jsonl") } else { ("prompts.jsonl", "questions.jsonl") };
    let (pp, qp) = (dir.join(p), dir.join(q));
    let prompts = parse_jsonl(&run.read(&pp)?, &pp)?;
    let questions = parse_jsonl(&run.read(&qp)?, &qp)?;
    Ok(Data { prompts, questions })
}

/// Parses arguments from the process and runs; returns the exit code.
pub fn main_with_args(args: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, args) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<RunManifest> {
    let started = now();
    let cfg = effective_config(&cli)?;
    let resolved = RunConfig::from_config(&cfg)?;
    let verifier = parse_verifier(&cli.verifier)?;
    let name = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| output_root().join(name));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let default_data = || output_root().join("gen-data");
    let mut r = Run { name, args, cfg, run: resolved, out, inputs: BTreeMap::new(), outputs: Vec::new(), started };
    let res = match cli.command {
        Command::GenData { verbose } => gen_data(&mut r, verbose),
        Command::Pretrain { data } => cmd_pretrain(&mut r, &data.unwrap_or_else(default_data)),
        Command::Train { data, init } => cmd_train(&mut r, &data.unwrap_or_else(default_data), init.as_deref(), &verifier),
        Command::Eval { data, checkpoint, srr } => {
            cmd_eval(&mut r, &data.unwrap_or_else(default_data), &checkpoint, srr, &verifier)
        }
        Command::Serve { addr } => cmd_serve(&mut r, addr, &verifier),
        Command::Simulate => cmd_simulate(&mut r),
        Command::Report { run, eval } => cmd_report(&mut r, &run, &eval),
    };
    match res {
        Ok(()) => r.finish(),
        // Keep a record of the partial outputs (metrics so far, the failing
        // parameters) before reporting.
        Err(e @ CliError::Numerical(_)) => {
            r.finish()?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn gen_data(r: &mut Run, verbose: bool) -> Result<()> {
    let d = r.run.data.clone();
    let cat = catalog(&r.run)?;
    let env = |e: envtoy::EnvError| CliError::Config(e.to_string());
    let train = envtoy::generate_prompt_set(&cat, d.per_task, d.tier_ratio, d.seed).map_err(env)?;
    let held = envtoy::generate_prompt_set(&cat, d.eval_per_task, d.tier_ratio, d.eval_seed).map_err(env)?;
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    let mut dropped = 0;
    for (prompts, pfile, qfile) in [(&train, "prompts.jsonl", "questions.jsonl"), (&held, "eval_prompts.jsonl", "eval_questions.jsonl")] {
        let mut kept = Vec::new();
        for p in prompts {
            let set = dvreward::decompose(p).map_err(|e| CliError::Other(e.to_string()))?;
            match dvreward::filter_questions(set, d.max_questions) {
                Filtered::Kept(s) => kept.push(s),
                Filtered::Dropped { .. } => dropped += 1,
            }
        }
        if pfile == "prompts.jsonl" {
            for q in kept.iter().flat_map(|s| s.sem.iter().chain(&s.qua)) {
                *counts.entry(q.category).or_default() += 1;
            }
        }
        let mut buf = Vec::new();
        envtoy::write_prompts(prompts, &mut buf).map_err(|e| CliError::Other(e.to_string()))?;
        r.write(pfile, &buf)?;
        r.write(qfile, &jsonl(&kept)?)?;
    }
    let total: usize = counts.values().sum();
    let mut csv = String::from("category,group,count,share\n");
    for (c, n) in &counts {
        let group = if c.is_semantic() { "semantic" } else { "quality" };
        csv.push_str(&format!("{c:?},{group},{n},{:.4}\n", *n as f64 / total.max(1) as f64));
    }
    r.write("category_counts.csv", csv.as_bytes())?;
    println!("prompts: {} train, {} held-out; dropped {dropped} over {} questions", train.len(), held.len(), d.max_questions);
    if verbose {
        println!("{:<12} {:<9} {:>7} {:>7}", "category", "group", "count", "share");
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let share: f64 = f[3].parse().unwrap_or(0.0);
            println!("{:<12} {:<9} {:>7} {:>6.1}%", f[0], f[1], f[2], 100.0 * share);
        }
        println!("{:<12} {:<9} {:>7}", "total", "", total);
    }
    Ok(())
}

fn cmd_pretrain(r: &mut Run, data: &Path) -> Result<()> {
    let d = load_data(r, data, false)?;
    let spec = model_spec(&r.run)?;
    let m = PolicyModel::new(spec.clone());
    let mut params = m.init_params(r.run.seed);
    let report = model::pretrain(&m, &mut params, &d.prompts, &r.run.pretrain).map_err(|e| match e {
        model::ModelError::Grad(g) => CliError::Numerical(g.to_string()),
        e => CliError::Other(e.to_string()),
    })?;
    if !params.is_finite() {
        return Err(CliError::Numerical("non-finite parameters after pretraining".into()));
    }
    r.write("checkpoint.json", &checkpoint_bytes(&spec, &params, None)?)?;
    r.write("pretrain.json", &serde_json::to_vec_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?)?;
    println!(
        "flow loss {:.4} -> {:.4}, format loss {:.4} -> {:.4}",
        report.flow_loss_start, report.flow_loss_end, report.ar_loss_start, report.ar_loss_end
    );
    Ok(())
}

fn cmd_train(r: &mut Run, data: &Path, init: Option<&Path>, verifier: &VerifierSpec) -> Result<()> {
    let d = load_data(r, data, false)?;
    let (spec, params) = match init {
        Some(p) => {
            let ck = load_checkpoint(r, p)?;
            (ck.model, ck.params)
        }
        None => {
            let spec = model_spec(&r.run)?;
            let params = PolicyModel::new(spec.clone()).init_params(r.run.seed);
            (spec, params)
        }
    };
    let m = PolicyModel::new(spec.clone());
    let mut tcfg = r.run.train.clone();
    tcfg.max_len = spec.max_len;
    let client = reward_client(verifier, &r.run)?;
    let every = r.run.checkpoint_every;
    let metrics_path = r.out.join("metrics.jsonl");
    let tmp = metrics_path.with_extension("jsonl.tmp~");
    let mut sink = std::io::BufWriter::new(fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?);
    let mut periodic: Vec<(String, Vec<u8>)> = Vec::new();
    let total = tcfg.steps;
    let result = grpotrain::train(&m, &params, &d.prompts, &d.questions, &tcfg, &client, &mut |s: &StepMetrics, p, o| {
        serde_json::to_writer(&mut sink, s)?;
        sink.write_all(b"\n")?;
        if every > 0 && (s.step + 1) % every == 0 && s.step + 1 < total {
            let bytes = checkpoint_bytes(&spec, p, Some(o)).map_err(|e| std::io::Error::other(e.to_string()))?;
            periodic.push((format!("checkpoints/step_{:05}.json", s.step + 1), bytes));
        }
        if (s.step + 1) % 10 == 0 || s.step + 1 == total {
            eprintln!("step {:>5}  reward {:.4}  clip {:.3}", s.step + 1, s.mean_reward, s.clip_frac);
        }
        Ok(())
    });
    sink.flush().map_err(|e| io_err(&tmp, e))?;
    drop(sink);
    fs::rename(&tmp, &metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    r.outputs.push(metrics_path);
    for (name, bytes) in periodic {
        r.write(&name, &bytes)?;
    }
    match result {
        Ok(art) => {
            r.write("checkpoint.json", &checkpoint_bytes(&spec, &art.params, Some(&art.optimizer))?)?;
            Ok(())
        }
        Err(TrainError::Numerical { step, message, params, optimizer }) => {
            r.write(&format!("failed_step_{step:05}.json"), &checkpoint_bytes(&spec, &params, Some(&optimizer))?)?;
            Err(CliError::Numerical(format!("step {step}: {message}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(r: &mut Run, data: &Path, checkpoint: &Path, srr: bool, verifier: &VerifierSpec) -> Result<()> {
    let d = load_data(r, data, true)?;
    let ck = load_checkpoint(r, checkpoint)?;
    let m = PolicyModel::new(ck.model.clone());
    let client = reward_client(verifier, &r.run)?;
    let mut tcfg = r.run.train.clone();
    tcfg.max_len = ck.model.max_len;
    let rep: EvalReport = grpotrain::eval_suite(&m, &ck.params, &d.prompts, &d.questions, &tcfg, &client, srr)?;
    r.write("eval.json", &serde_json::to_vec_pretty(&rep).map_err(|e| CliError::Other(e.to_string()))?)?;
    r.write("eval.csv", report::eval_csv("eval", &rep).as_bytes())?;
    print!("{}", report::eval_csv("eval", &rep));
    Ok(())
}

fn cmd_serve(r: &mut Run, addr: Option<SocketAddr>, verifier: &VerifierSpec) -> Result<()> {
    let addr = match addr {
        Some(a) => a,
        None => r.run.serve_addr.parse().map_err(|_| CliError::Config(format!("bad serve.addr `{}`", r.run.serve_addr)))?,
    };
    let backend = match verifier {
        VerifierSpec::Analytic => Backend::Analytic(AnalyticVerifier { temperature: r.run.train.verifier_temperature }),
        VerifierSpec::Remote(url) => Backend::Remote(
            RemoteLogprobVerifier::new(url.clone(), Duration::from_secs(60)).map_err(|e| CliError::Other(e.to_string()))?,
        ),
    };
    let handle = alphagrpo_serve::serve(ServeConfig { addr, backend, delay: Duration::ZERO, handle_signals: true })
        .map_err(|e| CliError::Other(e.to_string()))?;
    eprintln!("listening on {} (Ctrl-C to stop)", handle.url());
    handle.wait().map_err(|e| CliError::Other(e.to_string()))?;
    Ok(())
}

fn cmd_simulate(r: &mut Run) -> Result<()> {
    let base = r.run.sim;
    let mut csv = String::from("policy,mean_bubble_secs,std_bubble_secs,mean_step_secs,utilization\n");
    let mut log = String::from("policy,step,node,wall_ns,busy_ns,bubble_ns\n");
    let mut reports = Vec::new();
    for policy in SchedulePolicy::ALL {
        let scenario = ScheduleScenario { policy, ..base };
        let rep = rewardserve::simulate_schedule(&scenario, r.run.seed).map_err(|e| CliError::Config(e.to_string()))?;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            policy.name(),
            rep.mean_bubble_secs,
            rep.std_bubble_secs,
            rep.mean_step_secs,
            rep.utilization
        ));
        for t in &rep.log {
            log.push_str(&format!("{},{},{},{},{},{}\n", policy.name(), t.step, t.node, t.wall_ns, t.busy_ns, t.bubble_ns));
        }
        println!("{:<20} bubble {:>12.6e} s (std {:.3e})  utilization {:.4}", policy.name(), rep.mean_bubble_secs, rep.std_bubble_secs, rep.utilization);
        reports.push((policy.name().to_string(), rep.mean_bubble_secs));
    }
    r.write("bubble.csv", csv.as_bytes())?;
    r.write("schedule_log.csv", log.as_bytes())?;
    r.write("bubble.svg", report::bar_chart("Reward-waiting bubble per step", "seconds", &reports).as_bytes())?;
    Ok(())
}

fn cmd_report(r: &mut Run, runs: &[PathBuf], evals: &[PathBuf]) -> Result<()> {
    let mut reward = Vec::new();
    let mut diag = Vec::new();
    let mut tables = String::new();
    for (i, dir) in runs.iter().enumerate() {
        let path = dir.join("metrics.jsonl");
        let metrics: Vec<StepMetrics> = parse_jsonl(&r.read(&path)?, &path)?;
        let label = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("run{i}"));
        let csv_name = if runs.len() == 1 { "metrics.csv".to_string() } else { format!("metrics_{i}_{label}.csv") };
        r.write(&csv_name, report::metrics_csv(&metrics).as_bytes())?;
        let pts = |f: fn(&StepMetrics) -> f64| metrics.iter().map(|m| ((m.step + 1) as f64, f(m))).collect::<Vec<_>>();
        reward.push(report::Series { name: label.clone(), points: pts(|m| m.mean_reward) });
        diag.push(report::Series { name: format!("{label} clip"), points: pts(|m| m.clip_frac) });
        diag.push(report::Series { name: format!("{label} nondeg"), points: pts(|m| m.nondegenerate_frac) });
    }
    r.write("reward.svg", report::line_chart("Mean group reward", "step", "reward", &reward).as_bytes())?;
    r.write("diagnostics.svg", report::line_chart("Clip fraction and usable groups", "step", "fraction", &diag).as_bytes())?;
    let mut bars = Vec::new();
    for (i, p) in evals.iter().enumerate() {
        let rep: EvalReport = serde_json::from_slice(&r.read(p)?).map_err(|e| CliError::Other(format!("{}: {e}", p.display())))?;
        let label = p.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("eval{i}"));
        let csv = report::eval_csv(&label, &rep);
        if tables.is_empty() {
            tables.push_str(&csv);
        } else {
            tables.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
        }
        bars.push((label, rep.mean_reward));
    }
    if !evals.is_empty() {
        r.write("eval_table.csv", tables.as_bytes())?;
        r.write("eval.svg", report::bar_chart("Held-out mean reward", "reward", &bars).as_bytes())?;
    }
    Ok(())
}
