//! `latentplan`: data generation, training, planning and evaluation.

mod commands;
mod error;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "latentplan", version, about = "Learn latent motion models and plan through them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic motion dataset CSV.
    SynthData(SynthArgs),
    /// Fit a latent dynamical model to a dataset.
    Train(TrainArgs),
    /// Plan a MAP trajectory for a task.
    Plan(PlanArgs),
    /// Compute multiscale guidance controls only.
    Guide(GuideArgs),
    /// Success-rate sweep over cases, environments and seeds.
    Eval(EvalArgs),
    /// Check the control/inference identities on random finite problems.
    VerifyDuality(DualityArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Train(_) => "train",
            Command::Plan(_) => "plan",
            Command::Guide(_) => "guide",
            Command::Eval(_) => "eval",
            Command::VerifyDuality(_) => "verify-duality",
            Command::Replay(_) => "replay",
        }
    }

    /// Output file paths, for redirecting a replay.
    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Command::SynthData(a) => [Some(&mut a.out), a.latent_out.as_mut()].into_iter().flatten().collect(),
            Command::Train(a) => [Some(&mut a.out), a.curve.as_mut()].into_iter().flatten().collect(),
            Command::Plan(a) => [Some(&mut a.out), a.svg.as_mut()].into_iter().flatten().collect(),
            Command::Guide(a) => vec![&mut a.out],
            Command::Eval(a) => vec![&mut a.out],
            Command::VerifyDuality(a) => a.out.iter_mut().collect(),
            Command::Replay(_) => vec![],
        }
    }

    fn from_manifest(subcommand: &str, config: serde_json::Value) -> CliResult<Self> {
        let mut map = serde_json::Map::new();
        map.insert(subcommand.to_string(), config);
        Ok(serde_json::from_value(serde_json::Value::Object(map))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Circle,
    Lissajous,
    TwoGait,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "circle")]
    pub kind: Kind,
    /// Observation dimension (3 velocity channels plus joints).
    #[arg(long, default_value_t = 12)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 30)]
    pub frames_per_cycle: usize,
    #[arg(long, default_value_t = 4)]
    pub cycles: usize,
    /// Peak yaw rate (rad/s); non-zero adds a turn coordinate.
    #[arg(long, default_value_t = 0.0)]
    pub turn_amplitude: f64,
    #[arg(long, default_value_t = 30.0)]
    pub frame_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ground-truth latent path as CSV.
    #[arg(long)]
    pub latent_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `phase:FREE:RBF_WIDTH:PHASE_WIDTH` (FREE rbf dims plus a cos/sin phase
    /// pair) or `rbf:WIDTH` (every dim).
    #[arg(long)]
    pub back_constraints: Option<String>,
    /// Model JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Objective-per-iteration CSV; defaults to `training_curve.csv` next to the model.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PiArgs {
    /// Planning time step in seconds; defaults to the model's frame period.
    #[arg(long)]
    pub step: Option<f64>,
    /// Divide the weighted noise average by the particle count as well.
    #[arg(long)]
    pub literal_normalization: bool,
    /// Weight guided level particles by cost only.
    #[arg(long)]
    pub no_guidance_correction: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PlanArgs {
    /// Model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Task JSON.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub particles: usize,
    /// Overrides the task horizon.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Guidance control CSV (K rows, one column per latent dimension).
    #[arg(long, conflicts_with = "multiscale")]
    pub guidance: Option<PathBuf>,
    /// Level schedule `M:N,M:N,...`, coarsest first.
    #[arg(long)]
    pub multiscale: Option<String>,
    #[command(flatten)]
    pub pi: PiArgs,
    /// Trajectory CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a top-down SVG plot.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GuideArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    /// Level schedule `M:N,M:N,...`, coarsest first.
    #[arg(long)]
    pub multiscale: String,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub pi: PiArgs,
    /// Control CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Benchmark config JSON; the built-in two-environment arena when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use seeds 0..N instead of the configured list.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Results CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Report zero wall-clock so results are byte-comparable.
    #[arg(long)]
    pub no_wallclock: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DualityArgs {
    /// Number of random instances.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub max_states: usize,
    #[arg(long, default_value_t = 5)]
    pub max_horizon: usize,
    /// Per-instance residual CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A manifest.json written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs (same file names) into this directory instead.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("LATENTPLAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::input(format!("LATENTPLAN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::input(format!("thread pool: {e}")))
}

fn replay(args: &ReplayArgs) -> CliResult<()> {
    let m = manifest::RunManifest::load(&args.manifest)?;
    if m.subcommand == "replay" {
        return Err(CliError::input("a replay manifest cannot be replayed"));
    }
    let mut cmd = Command::from_manifest(&m.subcommand, m.config)?;
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
        for p in cmd.outputs_mut() {
            let name = p.file_name().map(|n| n.to_os_string()).ok_or_else(|| CliError::input("output path has no file name"))?;
            *p = dir.join(name);
        }
    }
    run(&cmd)
}

fn run(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::SynthData(a) => commands::synth(a, cmd),
        Command::Train(a) => commands::train(a, cmd),
        Command::Plan(a) => commands::plan(a, cmd),
        Command::Guide(a) => commands::guide(a, cmd),
        Command::Eval(a) => commands::eval(a, cmd),
        Command::VerifyDuality(a) => commands::verify_duality(a, cmd),
        Command::Replay(a) => replay(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(&cli.command));
    match result {
        Ok(()) => ExitCode::from(error::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
