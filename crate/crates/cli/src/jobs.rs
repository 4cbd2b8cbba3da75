//! Fully resolved commands. A job carries every input it needs, so a run
//! manifest holding one can be replayed without the original flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use layersep::data::{load_grouped_pools, load_split_pools, Pools};
use layersep::image::{to_log_domain, CompositeOp, Image, LOG_EPSILON};
use layersep::latent::{cluster_separation, export_latents, pools_from_test, project_2d};
use layersep::manifest::{Manifest, DOMAIN_NAMES};
use layersep::metrics::{evaluate_dataset, EvalOptions, IdentityOracle, ModelPredictor, Predictor};
use layersep::nn::{Checkpoint, Model, OutputHead};
use layersep::synth::{render_dataset, render_in_memory, RenderConfig};
use layersep::train::{self, separate, TrainConfig, TrainState, CHECKPOINT_FILE, LOG_FILE};
use layersep::Exec;

use crate::CliError;

/// Where training or evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// A dataset directory with a `manifest.json`.
    Dir(PathBuf),
    /// Scenes rendered in memory.
    Render(RenderConfig),
}

impl DataSource {
    pub fn load(&self, exec: Exec) -> Result<Pools, CliError> {
        match self {
            DataSource::Dir(dir) => {
                let manifest = Manifest::load(dir)?;
                if manifest.scenes.iter().any(|s| s.scene_group.is_some()) {
                    Ok(load_grouped_pools(&manifest, dir)?.0)
                } else {
                    Ok(load_split_pools(&manifest, dir)?)
                }
            }
            DataSource::Render(cfg) => {
                let (train, test) = render_in_memory(cfg, exec)?;
                Ok(Pools::from_scenes(&train, &test)?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorChoice {
    Checkpoint(PathBuf),
    /// Ground truth echoed back; a sanity check of the metrics.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub data: DataSource,
    pub config: TrainConfig,
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub data: DataSource,
    pub predictor: PredictorChoice,
    pub options: EvalOptions,
    pub composite: CompositeOp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparateJob {
    pub checkpoint: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub composite: CompositeOp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentsJob {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub n_samples: usize,
    pub seed: u64,
    /// Export from the test scenes instead of the training pools.
    pub held_out: bool,
    /// Side length of the scatter image, if one is wanted.
    pub scatter: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Job {
    Render { config: RenderConfig },
    Split { data: PathBuf },
    Train(TrainJob),
    Eval(EvalJob),
    Separate(SeparateJob),
    Latents(LatentsJob),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Render { .. } => "render",
            Job::Split { .. } => "split",
            Job::Train(_) => "train",
            Job::Eval(_) => "eval",
            Job::Separate(_) => "separate",
            Job::Latents(_) => "latents",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Render { config } => Some(config.seed),
            Job::Train(t) => Some(t.config.seed),
            Job::Latents(l) => Some(l.seed),
            _ => None,
        }
    }

    /// Runs the job, writing into `out`, and returns the files it produced.
    pub fn run(&self, out: &Path, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        match self {
            Job::Render { config } => {
                let m = render_dataset(config, out, exec)?;
                log::info!("rendered {} scenes into {}", m.scenes.len(), out.display());
                Ok(vec![out.join(layersep::manifest::MANIFEST_FILE)])
            }
            Job::Split { data } => run_split(data, out),
            Job::Train(j) => run_train(j, out, exec),
            Job::Eval(j) => run_eval(j, out, exec),
            Job::Separate(j) => run_separate(j, out, exec),
            Job::Latents(j) => run_latents(j, out, exec),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct SplitSummary {
    subset1_groups: Vec<String>,
    subset2_groups: Vec<String>,
    input_scenes: Vec<String>,
    layer_scenes: Vec<String>,
    test_scenes: Vec<String>,
}

fn run_split(data: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let manifest = Manifest::load(data)?;
    let (_, split) = load_grouped_pools(&manifest, data)?;
    let ids = |v: &[layersep::data::DomainSample]| {
        let ids: BTreeSet<String> = v.iter().map(|s| s.scene_id.clone()).collect();
        ids.into_iter().collect::<Vec<_>>()
    };
    let summary = SplitSummary {
        subset1_groups: split.subset1_groups.iter().cloned().collect(),
        subset2_groups: split.subset2_groups.iter().cloned().collect(),
        input_scenes: ids(&split.input_pool),
        layer_scenes: ids(&split.layer_pool),
        test_scenes: ids(&split.test_pool),
    };
    println!(
        "subset 1: {} groups, {} inputs; subset 2: {} groups, {} layer samples",
        summary.subset1_groups.len(),
        split.input_pool.len(),
        summary.subset2_groups.len(),
        split.layer_pool.len()
    );
    let path = out.join("split.json");
    write_json(&path, &summary)?;
    Ok(vec![path])
}

fn run_train(job: &TrainJob, out: &Path, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let pools = job.data.load(exec)?;
    let resume = if job.resume {
        let path = out.join(CHECKPOINT_FILE);
        let (state, saved) = TrainState::from_checkpoint(Checkpoint::load(&path)?)?;
        let comparable = TrainConfig {
            max_steps: job.config.max_steps,
            ..saved
        };
        if comparable != job.config {
            log::warn!("resuming with a config that differs from the checkpoint's");
        }
        log::info!("resuming from step {}", state.step);
        Some(state)
    } else {
        None
    };
    let result = train::train(&job.config, &pools, Some(out), resume, exec)?;
    if let Some(last) = result.records.last() {
        println!(
            "step {}: total {:.4}, cc_x {:.4}",
            last.step, last.report.total, last.report.cc_x
        );
    }
    Ok([Some(out.join(LOG_FILE)), result.checkpoint].into_iter().flatten().collect())
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let (state, _) = TrainState::from_checkpoint(Checkpoint::load(path)?)?;
    Ok(state.model)
}

fn run_eval(job: &EvalJob, out: &Path, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let pools = job.data.load(exec)?;
    let model;
    let predictor: Box<dyn Predictor> = match &job.predictor {
        PredictorChoice::Identity => Box::new(IdentityOracle),
        PredictorChoice::Checkpoint(path) => {
            model = load_model(path)?;
            Box::new(ModelPredictor {
                model: &model,
                op: job.composite,
                exec: Exec::Sequential,
            })
        }
    };
    let report = evaluate_dataset(predictor.as_ref(), &pools.test, &job.options, exec)?;
    print!("{}", report.table());
    let (json, csv) = (out.join("metrics.json"), out.join("samples.csv"));
    report.write_json(&json)?;
    report.write_samples_csv(&csv)?;
    Ok(vec![json, csv])
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Usage("no input images given".into()));
    }
    Ok(files)
}

fn run_separate(job: &SeparateJob, out: &Path, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(&job.checkpoint)?;
    let log_domain = model.profile.head == OutputHead::Identity;
    let mut written = Vec::new();
    for file in collect_inputs(&job.inputs)? {
        let img = Image::load_png(&file)?.to_rgb();
        let img = if log_domain { to_log_domain(&img, LOG_EPSILON)? } else { img };
        let sep = separate(&model, &img, job.composite, exec)?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dir = out.join(stem);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (k, layer) in sep.layers.iter().enumerate() {
            let path = dir.join(format!("{}.png", DOMAIN_NAMES[k + 1]));
            layer.save_png(&path, 8)?;
            written.push(path);
        }
        let path = dir.join("recon.png");
        sep.recon.save_png(&path, 8)?;
        written.push(path);
    }
    println!("separated {} images", written.len() / (model.n_layers + 1));
    Ok(written)
}

fn run_latents(job: &LatentsJob, out: &Path, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(&job.checkpoint)?;
    let pools = job.data.load(exec)?;
    let pools = if job.held_out { pools_from_test(&pools)? } else { pools };
    let dump = export_latents(&model, &pools, job.n_samples, job.seed, exec)?;
    let mut written = vec![out.join("latents.csv")];
    dump.write_csv(&written[0])?;
    match project_2d(&dump) {
        Ok(p) => {
            let path = out.join("projection.csv");
            p.write_csv(&dump, &path)?;
            written.push(path);
            if let Some(size) = job.scatter {
                let path = out.join("scatter.png");
                p.scatter(&dump, size)?.save_png(&path, 8)?;
                written.push(path);
            }
        }
        Err(layersep::Error::Degenerate(m)) => log::warn!("no projection: {m}"),
        Err(e) => return Err(e.into()),
    }
    let stats = cluster_separation(&dump)?;
    println!(
        "intra y {:.6}, intra z {:.6}, inter {:.6}, ratio {:.4}",
        stats.intra_y, stats.intra_z, stats.inter, stats.ratio
    );
    let path = out.join("clusters.json");
    write_json(&path, &stats)?;
    written.push(path);
    Ok(written)
}
