//! `layersep`: render, split, train, eval, separate, latents, replay.

mod config;
mod jobs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use layersep::image::CompositeOp;
use layersep::manifest::Manifest;
use layersep::metrics::{EvalOptions, Metric};
use layersep::Exec;

use config::{Preset, WeightArgs};
use jobs::{DataSource, EvalJob, Job, LatentsJob, PredictorChoice, SeparateJob, TrainJob};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or paths: exit code 2.
    Usage(String),
    Core(layersep::Error),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(path.to_path_buf(), e)
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(layersep::Error::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<layersep::Error> for CliError {
    fn from(e: layersep::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "layersep", version, about = "Unsupervised single-image layer separation")]
struct Cli {
    /// TOML file laid over the preset: [render], [train], composite.
    #[arg(long, global = true, env = "LAYERSEP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "LAYERSEP_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "LAYERSEP_OUT")]
    out: Option<PathBuf>,
    /// Run every kernel on the calling thread.
    #[arg(long, global = true, env = "LAYERSEP_SEQUENTIAL")]
    sequential: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic shapes dataset.
    Render(RenderArgs),
    /// Split a scene-grouped dataset into disjoint input and layer subsets.
    Split(SplitArgs),
    /// Train the separation networks.
    Train(TrainArgs),
    /// Score predicted layers against ground truth.
    Eval(EvalArgs),
    /// Separate PNG images into layers.
    Separate(SeparateArgs),
    /// Export latent codes with a PCA projection and cluster statistics.
    Latents(LatentsArgs),
    /// Re-run a command from its run manifest.
    Replay(ReplayArgs),
}

#[derive(clap::Args, Debug)]
struct RenderArgs {
    /// smoke, synthetic, intrinsic or reflection
    #[arg(long, default_value = "synthetic", env = "LAYERSEP_PRESET")]
    preset: Preset,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    antialias: bool,
}

#[derive(clap::Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// smoke, synthetic, intrinsic or reflection
    #[arg(long, default_value = "synthetic", env = "LAYERSEP_PRESET")]
    preset: Preset,
    /// Dataset directory; without it the preset's scenes are rendered in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    weights: WeightArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OpArg {
    Additive,
    AdditiveUnclipped,
    LogAdditive,
}

impl From<OpArg> for CompositeOp {
    fn from(o: OpArg) -> Self {
        match o {
            OpArg::Additive => CompositeOp::AdditiveClipped,
            OpArg::AdditiveUnclipped => CompositeOp::AdditiveUnclipped,
            OpArg::LogAdditive => CompositeOp::LogAdditive,
        }
    }
}

#[derive(clap::Args, Debug)]
#[command(group(ArgGroup::new("predictor").required(true).args(["checkpoint", "oracle"])))]
struct EvalArgs {
    /// smoke, synthetic, intrinsic or reflection
    #[arg(long, default_value = "synthetic", env = "LAYERSEP_PRESET")]
    preset: Preset,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<Metric>,
    #[arg(long, value_enum)]
    op: Option<OpArg>,
}

#[derive(clap::Args, Debug)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    op: Option<OpArg>,
    /// PNG files or directories of them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct LatentsArgs {
    /// smoke, synthetic, intrinsic or reflection
    #[arg(long, default_value = "synthetic", env = "LAYERSEP_PRESET")]
    preset: Preset,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples per tag.
    #[arg(long, default_value_t = layersep::latent::DEFAULT_SAMPLES)]
    n: usize,
    /// Use the test scenes rather than the training pools.
    #[arg(long)]
    held_out: bool,
    /// Also render a scatter plot of this many pixels a side.
    #[arg(long)]
    scatter: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// Written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    job: Job,
    seed: Option<u64>,
    version: String,
    started_unix: u64,
    finished_unix: u64,
    out: PathBuf,
    outputs: Vec<PathBuf>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn data_source(data: Option<PathBuf>, settings: &config::Settings) -> DataSource {
    match data {
        Some(d) => DataSource::Dir(d),
        None => DataSource::Render(settings.render.clone()),
    }
}

fn composite_for(data: &DataSource, op: Option<OpArg>, fallback: CompositeOp) -> Result<CompositeOp, CliError> {
    if let Some(op) = op {
        return Ok(op.into());
    }
    match data {
        DataSource::Dir(d) => Ok(Manifest::load(d)?.composite),
        DataSource::Render(_) => Ok(fallback),
    }
}

fn resolve(cli: &Cli) -> Result<Job, CliError> {
    let cfg = cli.config.as_deref();
    let job = match &cli.command {
        Command::Render(a) => {
            let mut s = config::load(a.preset, cfg)?;
            let r = &mut s.render;
            r.n_layers = a.layers.unwrap_or(r.n_layers);
            r.n_train = a.n_train.unwrap_or(r.n_train);
            r.n_test = a.n_test.unwrap_or(r.n_test);
            r.image_size = a.size.unwrap_or(r.image_size);
            r.antialias |= a.antialias;
            r.seed = cli.seed.unwrap_or(r.seed);
            Job::Render { config: s.render }
        }
        Command::Split(a) => Job::Split { data: a.data.clone() },
        Command::Train(a) => {
            let mut s = config::load(a.preset, cfg)?;
            if let Some(n) = a.layers {
                s.render.n_layers = n;
                s.train.n_layers = n;
            }
            if let Some(seed) = cli.seed {
                s.render.seed = seed;
                s.train.seed = seed;
            }
            let t = &mut s.train;
            t.max_steps = a.steps.unwrap_or(t.max_steps);
            t.learning_rate = a.lr.unwrap_or(t.learning_rate);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
            a.weights.apply(&mut t.weights);
            Job::Train(TrainJob {
                data: data_source(a.data.clone(), &s),
                config: s.train,
                resume: a.resume,
            })
        }
        Command::Eval(a) => {
            let mut s = config::load(a.preset, cfg)?;
            s.render.seed = cli.seed.unwrap_or(s.render.seed);
            let data = data_source(a.data.clone(), &s);
            let mut options = EvalOptions::default();
            if !a.metrics.is_empty() {
                options.metrics = a.metrics.clone();
            }
            Job::Eval(EvalJob {
                composite: composite_for(&data, a.op, s.composite)?,
                data,
                predictor: match &a.checkpoint {
                    Some(p) => PredictorChoice::Checkpoint(p.clone()),
                    None => PredictorChoice::Identity,
                },
                options,
            })
        }
        Command::Separate(a) => Job::Separate(SeparateJob {
            checkpoint: a.checkpoint.clone(),
            inputs: a.inputs.clone(),
            composite: a.op.map_or(CompositeOp::AdditiveClipped, Into::into),
        }),
        Command::Latents(a) => {
            let mut s = config::load(a.preset, cfg)?;
            s.render.seed = cli.seed.unwrap_or(s.render.seed);
            Job::Latents(LatentsJob {
                checkpoint: a.checkpoint.clone(),
                data: data_source(a.data.clone(), &s),
                n_samples: a.n,
                seed: cli.seed.unwrap_or(0),
                held_out: a.held_out,
                scatter: a.scatter,
            })
        }
        Command::Replay(a) => {
            let text = std::fs::read_to_string(&a.manifest).map_err(|e| CliError::Usage(format!("{}: {e}", a.manifest.display())))?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", a.manifest.display())))?;
            m.job
        }
    };
    Ok(job)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out <DIR> is required".into()))?;
    let job = resolve(&cli)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let started_unix = unix_now();
    let outputs = job.run(&out, exec)?;
    let manifest = RunManifest {
        command: job.name().into(),
        seed: job.seed(),
        job,
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix,
        finished_unix: unix_now(),
        out: out.clone(),
        outputs,
    };
    let path = out.join(RUN_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("run manifest serializes");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
