//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{self, ConfigError};
use crate::demand::DemandMode;
use crate::evm::ControllerParams;
use crate::learner::{
    default_steps, noise_success_curve, online_finetune, read_labeled, train_selector, write_labeled, Activation,
    Hyperparams, LabeledRow, LearnError, ParamSelector, Topology,
};
use crate::sim::{SimError, Simulation};
use crate::tuner::{build_dataset, read_dataset, write_dataset, SearchSettings, TuneError};

#[derive(Debug, Parser)]
#[command(name = "atn", version, about = "Automated transit network simulator and parameter learner")]
pub struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Write a JSON run manifest here.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write its metrics as JSON.
    Simulate(SimulateArgs),
    /// Tune every scenario of a batch and write the dataset CSV.
    Tune(TuneArgs),
    /// Cluster tuned parameters and train the environment classifier.
    Train(TrainArgs),
    /// Map an environment vector to controller parameters.
    Predict(PredictArgs),
    /// Success rate of a trained model under input noise.
    Evaluate(EvaluateArgs),
    /// Hill-climb controller parameters on one scenario.
    Finetune(FinetuneArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimMode {
    /// Poisson demand as configured in the scenario.
    Demand,
    /// Every station with outgoing trips always has a group waiting.
    Ridership,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Controller parameters; EVM is disabled when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, value_enum, default_value_t = SimMode::Demand)]
    pub mode: SimMode,
    /// Metrics JSON; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tab-separated event log.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long)]
    pub bounds: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
    #[arg(long, default_value_t = 4)]
    pub rounds: usize,
    #[arg(long, default_value_t = 3)]
    pub replications: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HiddenActivation {
    Tanh,
    Sigmoid,
    Relu,
    Linear,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value_t = HiddenActivation::Tanh)]
    pub activation: HiddenActivation,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Dropout rate on the hidden layer; disabled when omitted.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Model JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Every row with its cluster label.
    #[arg(long)]
    pub labeled_out: Option<PathBuf>,
    /// Held-out rows with their cluster labels.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Environment vector JSON.
    #[arg(long)]
    pub env: PathBuf,
    /// Parameters JSON; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled CSV, usually the held-out split written by `train --test-out`.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Starting parameters.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    #[arg(long, default_value_t = 3)]
    pub replications: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input; exit status 2.
    Invalid(String),
    /// Failure while running; exit status 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::WindowTooLong { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<TuneError> for CliError {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::Sim(s) => s.into(),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Tune(t) => t.into(),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

/// What a command read and wrote.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_s: f64,
}

struct Ctx {
    seed: u64,
    quiet: bool,
    manifest: RunManifest,
}

impl Ctx {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn input(&mut self, p: &Path) {
        self.manifest.config_paths.push(p.to_path_buf());
    }

    fn write(&mut self, p: &Path, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(p, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        self.manifest.outputs.push(p.to_path_buf());
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("values serialize");
    s.push(b'\n');
    s
}

fn stdout(bytes: &[u8]) -> Result<(), CliError> {
    std::io::stdout().write_all(bytes).map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

fn open(p: &Path) -> Result<fs::File, CliError> {
    fs::File::open(p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
}

fn load_model(p: &Path) -> Result<ParamSelector<f64>, CliError> {
    let model: ParamSelector<f64> = config::load_json(p)?;
    model.validate().map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
    Ok(model)
}

fn simulate(a: &SimulateArgs, ctx: &mut Ctx, seed: Option<u64>) -> Result<(), CliError> {
    ctx.input(&a.scenario);
    let mut s = config::load_scenario(&a.scenario)?;
    let params = match &a.params {
        Some(p) => {
            ctx.input(p);
            config::load_params(p)?
        }
        None => ControllerParams::disabled(),
    };
    if let Some(h) = a.horizon {
        s.sim.horizon = h;
    }
    if let Some(seed) = seed {
        s.sim.seed = seed;
    }
    ctx.manifest.seed = s.sim.seed;
    if a.mode == SimMode::Ridership {
        s.demand.mode = DemandMode::InfiniteQueues;
        s.demand.rates = vec![0.0; s.net.len()];
    }
    let scenario = s.scenario(0);
    let mut sim = Simulation::new(&scenario.net, &scenario.demand, scenario.sim.clone(), scenario.controller(params))?;
    if a.events.is_some() {
        sim = sim.with_event_log();
    }
    let (metrics, log) = sim.run_logged();
    if let Some(p) = &a.events {
        let mut text = String::from("time\tkind\tvehicle\tfrom\tto\n");
        for r in &log {
            text.push_str(&r.to_string());
            text.push('\n');
        }
        ctx.write(p, text.as_bytes())?;
    }
    let json = to_json(&metrics);
    match &a.out {
        Some(p) => ctx.write(p, &json),
        None => stdout(&json),
    }
}

fn tune(a: &TuneArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    ctx.input(&a.bounds);
    let bounds = config::load_bounds(&a.bounds)?;
    let batch = config::load_batch(&a.batch)?;
    for f in &batch.files {
        ctx.input(f);
    }
    let scenarios = batch.scenarios(ctx.seed)?;
    let settings =
        SearchSettings { budget: a.budget, rounds: a.rounds, replications: a.replications, bounds, seed: ctx.seed };
    ctx.progress(format!(
        "tuning {} scenarios, budget {} over {} rounds, {} replications",
        scenarios.len(),
        a.budget,
        a.rounds,
        a.replications
    ));
    let rows = build_dataset(&scenarios, &settings)?;
    let mut buf = Vec::new();
    write_dataset(&rows, &mut buf)?;
    ctx.write(&a.out, &buf)?;
    let improved = rows.iter().filter(|r| r.objective < r.baseline).count();
    ctx.progress(format!("wrote {} rows to {}; {improved} beat EVM off", rows.len(), a.out.display()));
    Ok(())
}

fn train(a: &TrainArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    ctx.input(&a.dataset);
    let dataset = read_dataset(open(&a.dataset)?)?;
    let hidden_activation = match a.activation {
        HiddenActivation::Tanh => Activation::Tanh,
        HiddenActivation::Sigmoid => Activation::Sigmoid,
        HiddenActivation::Relu => Activation::Relu,
        HiddenActivation::Linear => Activation::identity(),
    };
    let topology = Topology { hidden: a.hidden, hidden_activation, output_activation: Activation::identity() };
    let hyper = Hyperparams {
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        epochs: a.epochs,
        batch_size: a.batch_size,
        dropout_rate: a.dropout,
        train_fraction: a.train_fraction,
        seed: ctx.seed,
    };
    ctx.progress(format!("clustering {} rows into {} groups", dataset.len(), a.k));
    let (selector, outcome, labeled) = train_selector(&dataset, a.k, &topology, &hyper)?;
    ctx.write(&a.out, &to_json(&selector))?;
    let csv = |rows: Vec<LabeledRow<f64>>| -> Result<Vec<u8>, CliError> {
        let mut buf = Vec::new();
        write_labeled(&rows, &mut buf)?;
        Ok(buf)
    };
    if let Some(p) = &a.labeled_out {
        ctx.write(p, &csv(labeled.clone())?)?;
    }
    if let Some(p) = &a.test_out {
        ctx.write(p, &csv(outcome.test.iter().map(|&i| labeled[i].clone()).collect())?)?;
    }
    ctx.progress(format!("test accuracy {:.3}", outcome.report.test_accuracy));
    stdout(&to_json(&outcome.report))
}

fn predict(a: &PredictArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    ctx.input(&a.model);
    ctx.input(&a.env);
    let model = load_model(&a.model)?;
    let env = config::load_env(&a.env)?;
    let x: Vec<f64> = env.to_array().to_vec();
    let cluster = model.classify(&x)?;
    let params = model.centroid_params(cluster)?;
    ctx.progress(format!("cluster {cluster}"));
    let json = to_json(&params);
    match &a.out {
        Some(p) => ctx.write(p, &json),
        None => stdout(&json),
    }
}

fn evaluate(a: &EvaluateArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    ctx.input(&a.model);
    ctx.input(&a.test);
    let model = load_model(&a.model)?;
    let rows = read_labeled(open(&a.test)?)?;
    let curve = noise_success_curve(&model, &rows, &a.sigmas, a.trials, ctx.seed)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let row_err = |e: csv::Error| CliError::Runtime(e.to_string());
    for p in &curve {
        w.serialize(p).map_err(row_err)?;
    }
    let buf = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    ctx.write(&a.out, &buf)?;
    ctx.progress(format!("{} curve points over {} test rows", curve.len(), rows.len()));
    Ok(())
}

fn finetune(a: &FinetuneArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    ctx.input(&a.params);
    ctx.input(&a.scenario);
    let params = config::load_params(&a.params)?;
    let mut s = config::load_scenario(&a.scenario)?;
    s.sim.seed = ctx.seed;
    let result = online_finetune(&params, &s.scenario(0), &default_steps(), a.iterations, ctx.seed, a.replications)?;
    ctx.write(&a.out, &to_json(&result.params))?;
    ctx.progress(format!(
        "objective {:.3} -> {:.3} s, {} of {} moves kept",
        result.trace[0], result.objective, result.accepted, a.iterations
    ));
    stdout(&to_json(&serde_json::json!({
        "objective": result.objective,
        "accepted": result.accepted,
        "trace": result.trace,
    })))
}

fn dispatch(cli: &Cli, ctx: &mut Ctx) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => simulate(a, ctx, cli.seed),
        Command::Tune(a) => tune(a, ctx),
        Command::Train(a) => train(a, ctx),
        Command::Predict(a) => predict(a, ctx),
        Command::Evaluate(a) => evaluate(a, ctx),
        Command::Finetune(a) => finetune(a, ctx),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Tune(_) => "tune",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Evaluate(_) => "evaluate",
        Command::Finetune(_) => "finetune",
    }
}

/// Runs a parsed command line inside a pool of `--jobs` workers.
pub fn run(cli: &Cli, args: Vec<String>) -> Result<(), CliError> {
    let started = Instant::now();
    let seed = cli.seed.unwrap_or(0);
    let mut ctx = Ctx {
        seed,
        quiet: cli.quiet,
        manifest: RunManifest {
            command: command_name(&cli.command).to_string(),
            args,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli, &mut ctx))?;
    if let Some(p) = &cli.manifest {
        ctx.manifest.duration_s = started.elapsed().as_secs_f64();
        let json = to_json(&ctx.manifest);
        fs::write(p, json).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

/// Entry point of the `atn` binary; returns the process exit status.
pub fn main() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&args);
    match run(&cli, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
