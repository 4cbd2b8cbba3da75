//! Alternating two-phase training of the separation streams.

mod adam;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::data::{augment, AugmentConfig, Batch, BatchSampler, DomainSample, Pools};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{self, Graph, Var};
use crate::image::{compose, CompositeOp, Image, LayerSet, RangeTag};
use crate::loss::{self, LossReport, LossWeights};
use crate::manifest::DOMAIN_NAMES;
use crate::nn::{self, Bound, Checkpoint, Model, ModelParams, NetworkProfile, OutputHead, Part, ProfileKind};
use crate::seed;
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub weights: LossWeights,
    pub gp_coefficient: f64,
    pub n_layers: usize,
    pub profile: ProfileKind,
    /// Explicit network layout; overrides `profile` when set.
    pub network: Option<NetworkProfile>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            batch_size: 1,
            max_steps: 10_000,
            weights: LossWeights::default(),
            gp_coefficient: 10.0,
            n_layers: 2,
            profile: ProfileKind::Synthetic,
            network: None,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.weights.validate()?;
        if self.n_layers < 2 || self.n_layers > DOMAIN_NAMES.len() - 1 {
            return Err(Error::InvalidConfig(format!(
                "n_layers must be between 2 and {}, got {}",
                DOMAIN_NAMES.len() - 1,
                self.n_layers
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.gp_coefficient >= 0.0 && self.gp_coefficient.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gp_coefficient must be non-negative, got {}",
                self.gp_coefficient
            )));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("checkpoint and log intervals must be positive".into()));
        }
        if let Some(n) = &self.network {
            n.validate()?;
        }
        Ok(())
    }

    /// Network layout for data of the given range: log-domain layers are
    /// unbounded, everything else goes through a sigmoid.
    pub fn resolve_profile(&self, range: RangeTag) -> NetworkProfile {
        let head = if range == RangeTag::Log {
            OutputHead::Identity
        } else {
            OutputHead::Sigmoid
        };
        let base = self.network.clone().unwrap_or_else(|| match self.profile {
            ProfileKind::Synthetic => NetworkProfile::synthetic(),
            ProfileKind::Real => NetworkProfile::real(),
        });
        base.with_head(head)
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    gen_t: u64,
    disc_t: u64,
    config: TrainConfig,
}

impl TrainState {
    pub fn init(profile: NetworkProfile, n_layers: usize, init_seed: u64) -> Result<TrainState> {
        Ok(TrainState {
            model: Model::build(profile, n_layers, seed::derive_seed(init_seed, "init", 0))?,
            gen_opt: Adam::default(),
            disc_opt: Adam::default(),
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut optim = ModelParams::new();
        for opt in [&self.gen_opt, &self.disc_opt] {
            for (n, t) in opt.m.iter() {
                optim.insert(format!("m.{n}"), t.clone());
            }
            for (n, t) in opt.v.iter() {
                optim.insert(format!("v.{n}"), t.clone());
            }
        }
        let meta = StateMeta {
            gen_t: self.gen_opt.t,
            disc_t: self.disc_opt.t,
            config: cfg.clone(),
        };
        Ok(Checkpoint {
            profile: self.model.profile.clone(),
            n_layers: self.model.n_layers,
            step: self.step,
            meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            params: self.model.params.clone(),
            optim,
        })
    }

    /// Restores a state and the config it was trained with.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(TrainState, TrainConfig)> {
        let meta: StateMeta = serde_json::from_value(ck.meta)
            .map_err(|e| Error::Checkpoint(format!("trainer metadata: {e}")))?;
        let mut gen_opt = Adam {
            t: meta.gen_t,
            ..Adam::default()
        };
        let mut disc_opt = Adam {
            t: meta.disc_t,
            ..Adam::default()
        };
        for (name, t) in ck.optim.iter() {
            let (kind, param) = name
                .split_once('.')
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer tensor {name}")))?;
            let part = nn::parse_name(param)
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer tensor {name}")))?
                .1;
            let opt = if part.is_generator() { &mut gen_opt } else { &mut disc_opt };
            match kind {
                "m" => opt.m.insert(param, t.clone()),
                "v" => opt.v.insert(param, t.clone()),
                _ => return Err(Error::Checkpoint(format!("bad optimizer tensor {name}"))),
            }
        }
        let model = Model::from_params(ck.profile, ck.n_layers, ck.params)?;
        Ok((
            TrainState {
                model,
                gen_opt,
                disc_opt,
                step: ck.step,
            },
            meta.config,
        ))
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub report: LossReport,
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
    pub d_loss: f64,
    pub gp: f64,
}

impl StepRecord {
    pub fn values(&self) -> Vec<f64> {
        let r = &self.report;
        let mut v = vec![self.step as f64, r.ss];
        v.extend(&r.gan);
        v.push(r.cc_x);
        v.extend(&r.cc);
        v.push(r.total);
        for (a, b) in self.d_real.iter().zip(&self.d_fake) {
            v.push(*a);
            v.push(*b);
        }
        v.push(self.d_loss);
        v.push(self.gp);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

pub fn log_header(n_layers: usize) -> Vec<String> {
    let names = &DOMAIN_NAMES[1..=n_layers];
    let mut h = vec!["step".to_string(), "ss".into()];
    h.extend(names.iter().map(|n| format!("gan_{n}")));
    h.push("cc_x".into());
    h.extend(names.iter().map(|n| format!("cc_{n}")));
    h.push("total".into());
    for n in names {
        h.push(format!("d_real_{n}"));
        h.push(format!("d_fake_{n}"));
    }
    h.push("d_loss".into());
    h.push("gp".into());
    h
}

/// Reads a training log back as its header and numeric rows.
pub fn read_log(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("{}: bad number {s:?}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let parts: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&parts)
}

fn finite(g: &Graph, v: Var, term: &str) -> Result<f64> {
    let t = g.value(v);
    if !t.is_finite() {
        return Err(Error::NonFinite { term: term.to_string() });
    }
    Ok(t.data().iter().sum::<f64>() / t.numel() as f64)
}

fn collect_grads(g: &Graph, names: &[String], grads: &[Var]) -> Result<Vec<(String, Tensor)>> {
    names
        .iter()
        .zip(grads)
        .map(|(n, &v)| {
            let t = g.value(v);
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("gradient of {n}"),
                });
            }
            Ok((n.clone(), t.clone()))
        })
        .collect()
}

fn trainable(p: &Bound, keep: impl Fn(Part) -> bool) -> (Vec<String>, Vec<Var>) {
    p.iter()
        .filter(|(n, _)| nn::parse_name(n).is_some_and(|(_, part)| keep(part)))
        .map(|(n, v)| (n.to_string(), v))
        .unzip()
}

/// Discriminator logit for `real` plus `coefficient` times the batch mean
/// of the squared input-gradient norm of the score.
fn penalized_logit(
    g: &mut Graph,
    p: &Bound,
    profile: &NetworkProfile,
    stream: usize,
    real: Var,
    coefficient: f64,
) -> Result<(Var, Var)> {
    let logit = nn::discriminate_logit(g, p, profile, stream, real)?;
    if coefficient == 0.0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok((logit, zero));
    }
    let score = g.sigmoid(logit);
    let total = g.sum(score);
    let gx = g.grad(total, &[real])?[0];
    let sq = g.pow(gx, 2.0);
    let sq = g.sum(sq);
    let n = g.shape(real)[0] as f64;
    Ok((logit, g.scale(sq, coefficient / n)))
}

/// `coefficient` times the mean over samples of `|d score / d real|^2`.
pub fn gradient_penalty(model: &Model, stream: usize, real: &Tensor, coefficient: f64, exec: Exec) -> Result<f64> {
    if !(coefficient >= 0.0) {
        return Err(Error::InvalidConfig(format!("gp coefficient must be non-negative, got {coefficient}")));
    }
    let mut g = Graph::new(exec);
    let p = Bound::bind(
        &mut g,
        &model.params,
        |n| nn::parse_name(n) == Some((stream, Part::Discriminator)),
        |_| false,
    );
    let x = g.param(real.clone());
    let (_, gp) = penalized_logit(&mut g, &p, &model.profile, stream, x, coefficient)?;
    Ok(g.scalar(gp))
}

/// Stacked tensors for one step.
#[derive(Clone, Debug)]
pub struct StepInput {
    pub x: Tensor,
    pub layers: Vec<Tensor>,
}

impl StepInput {
    pub fn from_batch(batch: &[Batch], n_layers: usize) -> Result<StepInput> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        for b in batch {
            if b.layers.len() != n_layers {
                return Err(Error::InvalidInput(format!(
                    "batch carries {} layer samples, model has {n_layers} streams",
                    b.layers.len()
                )));
            }
            if !b.is_non_triplet() {
                return Err(Error::Sampling(format!(
                    "batch pairs scene {} with its own layers",
                    b.x.scene_id
                )));
            }
        }
        let x = stack_images(&batch.iter().map(|b| &b.x.image).collect::<Vec<_>>())?;
        let layers = (0..n_layers)
            .map(|k| stack_images(&batch.iter().map(|b| &b.layers[k].image).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok(StepInput { x, layers })
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorPhase {
    pub report: LossReport,
    /// Predicted layers before the update, fed to the discriminators.
    pub fakes: Vec<Tensor>,
}

/// Graph nodes of the generator objective.
#[derive(Clone, Debug)]
pub struct GeneratorObjective {
    pub ss: Var,
    pub gan: Vec<Var>,
    pub cc_x: Var,
    pub cc: Vec<Var>,
    pub total: Var,
    pub preds: Vec<Var>,
}

/// Builds `w1 * ss + sum(gan) + w2 * (cc_x + sum(cc))` for blend `x` and one
/// unpaired sample per layer domain.
pub fn generator_objective(
    g: &mut Graph,
    p: &Bound,
    profile: &NetworkProfile,
    x: Var,
    layers: &[Var],
    w: &LossWeights,
) -> Result<GeneratorObjective> {
    let n = layers.len();
    let mut x_codes = Vec::with_capacity(n);
    let mut own_codes = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    for (k, &l) in layers.iter().enumerate() {
        let e = nn::encode(g, p, profile, k, x)?;
        preds.push(nn::decode(g, p, profile, k, &e)?);
        x_codes.push(e.latent);
        own_codes.push(nn::encode(g, p, profile, k, l)?.latent);
    }
    let ss = loss::graph::loss_ss(g, &x_codes, &own_codes, w)?;
    let recomposed = loss::graph::sum(g, &preds)?;
    let mut repreds = Vec::with_capacity(n);
    for k in 0..n {
        let e = nn::encode(g, p, profile, k, recomposed)?;
        repreds.push(nn::decode(g, p, profile, k, &e)?);
    }
    let (cc_x, cc) = loss::graph::loss_cc(g, x, &preds, &repreds, w)?;
    let mut gan = Vec::with_capacity(n);
    for (k, &pred) in preds.iter().enumerate() {
        let logit = nn::discriminate_logit(g, p, profile, k, pred)?;
        gan.push(loss::graph::gan_generator(g, logit, w.lambda0));
    }
    let ss_w = g.scale(ss, w.w1);
    let mut cc_terms = vec![cc_x];
    cc_terms.extend(&cc);
    let cc_sum = loss::graph::sum(g, &cc_terms)?;
    let cc_w = g.scale(cc_sum, w.w2);
    let mut terms = vec![ss_w, cc_w];
    terms.extend(&gan);
    let total = loss::graph::sum(g, &terms)?;
    Ok(GeneratorObjective {
        ss,
        gan,
        cc_x,
        cc,
        total,
        preds,
    })
}

/// Updates encoders and decoders on the weighted objective with the
/// discriminators held constant.
pub fn generator_phase(state: &mut TrainState, input: &StepInput, cfg: &TrainConfig, exec: Exec) -> Result<GeneratorPhase> {
    let n = state.model.n_layers;
    let profile = state.model.profile.clone();
    let mut g = Graph::new(exec);
    let p = Bound::bind(&mut g, &state.model.params, |_| true, |name| {
        nn::parse_name(name).is_some_and(|(_, part)| part.is_generator())
    });
    let x = g.constant(input.x.clone());
    let layers: Vec<Var> = input.layers.iter().map(|l| g.constant(l.clone())).collect();
    let obj = generator_objective(&mut g, &p, &profile, x, &layers, &cfg.weights)?;

    let mut report = LossReport {
        ss: finite(&g, obj.ss, "ss")?,
        cc_x: finite(&g, obj.cc_x, "cc_x")?,
        ..LossReport::default()
    };
    for k in 0..n {
        let name = DOMAIN_NAMES[k + 1];
        report.gan.push(finite(&g, obj.gan[k], &format!("gan_{name}"))?);
        report.cc.push(finite(&g, obj.cc[k], &format!("cc_{name}"))?);
    }
    report.total = finite(&g, obj.total, "total")?;

    let (names, vars) = trainable(&p, Part::is_generator);
    let grads = g.grad(obj.total, &vars)?;
    let grads = collect_grads(&g, &names, &grads)?;
    let fakes = obj.preds.iter().map(|&v| g.value(v).clone()).collect();
    drop(g);
    state.gen_opt.step(&cfg.adam(), &mut state.model.params, &grads)?;
    Ok(GeneratorPhase { report, fakes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorPhase {
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
    pub d_loss: f64,
    pub gp: f64,
}

/// Graph nodes of the discriminator objective.
#[derive(Clone, Debug)]
pub struct DiscriminatorObjective {
    pub real_logits: Vec<Var>,
    pub fake_logits: Vec<Var>,
    pub d_loss: Var,
    pub gp: Var,
    pub total: Var,
}

/// Builds the summed discriminator GAN loss plus the gradient penalty on
/// the real samples. `reals` must be differentiable for the penalty.
pub fn discriminator_objective(
    g: &mut Graph,
    p: &Bound,
    profile: &NetworkProfile,
    reals: &[Var],
    fakes: &[Var],
    lambda0: f64,
    gp_coefficient: f64,
) -> Result<DiscriminatorObjective> {
    if reals.len() != fakes.len() {
        return Err(Error::InvalidInput(format!("{} fakes for {} streams", fakes.len(), reals.len())));
    }
    let n = reals.len();
    let mut d_terms = Vec::with_capacity(n);
    let mut gp_terms = Vec::with_capacity(n);
    let mut real_logits = Vec::with_capacity(n);
    let mut fake_logits = Vec::with_capacity(n);
    for k in 0..n {
        let (real_logit, gp) = penalized_logit(g, p, profile, k, reals[k], gp_coefficient)?;
        let fake_logit = nn::discriminate_logit(g, p, profile, k, fakes[k])?;
        d_terms.push(loss::graph::gan_discriminator(g, real_logit, fake_logit, lambda0)?);
        gp_terms.push(gp);
        real_logits.push(real_logit);
        fake_logits.push(fake_logit);
    }
    let d_loss = loss::graph::sum(g, &d_terms)?;
    let gp = loss::graph::sum(g, &gp_terms)?;
    let total = g.add(d_loss, gp)?;
    Ok(DiscriminatorObjective {
        real_logits,
        fake_logits,
        d_loss,
        gp,
        total,
    })
}

/// Updates the discriminators on real layer samples against `fakes`, with
/// the generators untouched.
pub fn discriminator_phase(
    state: &mut TrainState,
    input: &StepInput,
    fakes: &[Tensor],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<DiscriminatorPhase> {
    let n = state.model.n_layers;
    if fakes.len() != n {
        return Err(Error::InvalidInput(format!("{} fakes for {n} streams", fakes.len())));
    }
    let profile = state.model.profile.clone();
    let mut g = Graph::new(exec);
    let p = Bound::bind(
        &mut g,
        &state.model.params,
        |name| nn::parse_name(name).is_some_and(|(_, part)| part == Part::Discriminator),
        |_| true,
    );
    let reals: Vec<Var> = input.layers.iter().map(|l| g.param(l.clone())).collect();
    let fakes: Vec<Var> = fakes.iter().map(|f| g.constant(f.clone())).collect();
    let obj = discriminator_objective(&mut g, &p, &profile, &reals, &fakes, cfg.weights.lambda0, cfg.gp_coefficient)?;
    let mean_score = |g: &Graph, v: Var| {
        let t = g.value(v);
        t.data().iter().map(|&l| graph::sigmoid(l)).sum::<f64>() / t.numel() as f64
    };
    let mut d_real = Vec::with_capacity(n);
    let mut d_fake = Vec::with_capacity(n);
    for k in 0..n {
        let name = DOMAIN_NAMES[k + 1];
        finite(&g, obj.real_logits[k], &format!("d_real_{name}"))?;
        finite(&g, obj.fake_logits[k], &format!("d_fake_{name}"))?;
        d_real.push(mean_score(&g, obj.real_logits[k]));
        d_fake.push(mean_score(&g, obj.fake_logits[k]));
    }
    let d_loss_v = finite(&g, obj.d_loss, "d_loss")?;
    let gp_v = finite(&g, obj.gp, "gp")?;
    let (names, vars) = trainable(&p, |part| part == Part::Discriminator);
    let grads = g.grad(obj.total, &vars)?;
    let grads = collect_grads(&g, &names, &grads)?;
    drop(g);
    state.disc_opt.step(&cfg.adam(), &mut state.model.params, &grads)?;
    Ok(DiscriminatorPhase {
        d_real,
        d_fake,
        d_loss: d_loss_v,
        gp: gp_v,
    })
}

/// One generator update with frozen discriminators, then one
/// discriminator update with frozen generators.
pub fn train_step(state: &mut TrainState, batch: &[Batch], cfg: &TrainConfig, exec: Exec) -> Result<StepRecord> {
    let input = StepInput::from_batch(batch, state.model.n_layers)?;
    let gen = generator_phase(state, &input, cfg, exec)?;
    let d = discriminator_phase(state, &input, &gen.fakes, cfg, exec)?;
    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        report: gen.report,
        d_real: d.d_real,
        d_fake: d.d_fake,
        d_loss: d.d_loss,
        gp: d.gp,
    })
}

fn augmented(sample: &DomainSample, aug_seed: u64, cfg: &AugmentConfig) -> Result<DomainSample> {
    Ok(DomainSample {
        image: augment(&sample.image, aug_seed, cfg)?,
        ..sample.clone()
    })
}

/// The batch for `step`, a pure function of `(seed, step)`.
pub fn batch_for_step(pools: &Pools, cfg: &TrainConfig, step: u64) -> Result<Vec<Batch>> {
    let sampler = BatchSampler::new(pools, cfg.seed);
    (0..cfg.batch_size as u64)
        .map(|j| {
            let index = step * cfg.batch_size as u64 + j;
            let b = sampler.batch(index)?;
            if !cfg.augment.enabled {
                return Ok(b);
            }
            let aug = |slot: u64, s: &DomainSample| {
                augmented(s, seed::derive_seed(cfg.seed, "augment", index * 8 + slot), &cfg.augment)
            };
            Ok(Batch {
                x: aug(0, &b.x)?,
                layers: b
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(k, s)| aug(k as u64 + 1, s))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
}

fn open_log(path: &Path, n_layers: usize, append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let file = if exists {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        w.write_record(log_header(n_layers))?;
    }
    Ok(w)
}

/// Checks that training images suit the profile and share one size.
pub fn check_pools(pools: &Pools, profile: &NetworkProfile, n_layers: usize, augment: &AugmentConfig) -> Result<()> {
    pools.validate(n_layers)?;
    let (h, w) = if augment.enabled {
        augment.target
    } else {
        let first = &pools.inputs[0].image;
        let dims = (first.height(), first.width());
        let all = pools.inputs.iter().chain(pools.layers.iter().flatten());
        if let Some(bad) = all.into_iter().find(|s| (s.image.height(), s.image.width()) != dims) {
            return Err(Error::InvalidInput(format!(
                "sample {} of scene {} is {}x{}, expected {}x{} (enable augmentation to crop)",
                bad.domain,
                bad.scene_id,
                bad.image.height(),
                bad.image.width(),
                dims.0,
                dims.1
            )));
        }
        dims
    };
    profile.check_input(h, w)
}

/// Runs `cfg.max_steps` steps from `resume` (or a fresh initialization),
/// writing the log and checkpoints into `out_dir` when given.
pub fn train(cfg: &TrainConfig, pools: &Pools, out_dir: Option<&Path>, resume: Option<TrainState>, exec: Exec) -> Result<TrainOutput> {
    cfg.validate()?;
    let range = pools
        .inputs
        .first()
        .map(|s| s.image.range())
        .ok_or_else(|| Error::InvalidInput("input pool is empty".into()))?;
    let resuming = resume.is_some();
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(cfg.resolve_profile(range), cfg.n_layers, cfg.seed)?,
    };
    if state.model.n_layers != cfg.n_layers {
        return Err(Error::InvalidConfig(format!(
            "resumed model has {} layers, config asks for {}",
            state.model.n_layers, cfg.n_layers
        )));
    }
    check_pools(pools, &state.model.profile, cfg.n_layers, &cfg.augment)?;

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
            Some(open_log(&dir.join(LOG_FILE), cfg.n_layers, resuming)?)
        }
        None => None,
    };
    let save = |state: &TrainState, path: &Path| -> Result<()> { state.to_checkpoint(cfg)?.save(path) };

    let started = Instant::now();
    let mut records = Vec::new();
    while state.step < cfg.max_steps {
        let batch = batch_for_step(pools, cfg, state.step)?;
        let rec = train_step(&mut state, &batch, cfg, exec)?;
        if let Some(w) = log.as_mut() {
            if rec.step % cfg.log_every == 0 || rec.step == cfg.max_steps {
                w.write_record(rec.values().iter().map(|v| v.to_string()))?;
            }
        }
        if rec.step % 50 == 0 || rec.step == cfg.max_steps {
            log::info!(
                "step {}/{} total {:.4} cc_x {:.4} ({:.1}s)",
                rec.step,
                cfg.max_steps,
                rec.report.total,
                rec.report.cc_x,
                started.elapsed().as_secs_f64()
            );
        }
        if let Some(dir) = out_dir {
            if rec.step % cfg.checkpoint_every == 0 {
                if let Some(w) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(dir, e))?;
                }
                save(&state, &dir.join(CHECKPOINT_DIR).join(format!("step_{:06}.ckpt", rec.step)))?;
                save(&state, &dir.join(CHECKPOINT_FILE))?;
            }
        }
        records.push(rec);
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            if let Some(w) = log.as_mut() {
                w.flush().map_err(|e| Error::io(dir, e))?;
            }
            let path = dir.join(CHECKPOINT_FILE);
            save(&state, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutput {
        state,
        records,
        checkpoint,
    })
}

/// Predicted layers for one image plus their recomposition.
#[derive(Clone, Debug)]
pub struct Separation {
    pub layers: Vec<Image>,
    pub recon: Image,
}

/// Runs every stream on `img`. `op` blends the predictions back together.
pub fn separate(model: &Model, img: &Image, op: CompositeOp, exec: Exec) -> Result<Separation> {
    if img.channels() != model.profile.channels {
        return Err(Error::Checkpoint(format!(
            "image has {} channels, model expects {}",
            img.channels(),
            model.profile.channels
        )));
    }
    model
        .profile
        .check_input(img.height(), img.width())
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let outs = model.separate(exec, &img.to_tensor())?;
    let range = match (model.profile.head, img.range()) {
        (OutputHead::Sigmoid, _) => RangeTag::Unit,
        (OutputHead::Identity, RangeTag::Log) => RangeTag::Log,
        (OutputHead::Identity, _) => RangeTag::Linear,
    };
    let layers = outs
        .iter()
        .map(|t| Image::from_tensor(t, range))
        .collect::<Result<Vec<_>>>()?;
    let op = if range == RangeTag::Log { CompositeOp::LogAdditive } else { op };
    let op = if range != RangeTag::Log && op == CompositeOp::LogAdditive {
        CompositeOp::AdditiveUnclipped
    } else {
        op
    };
    let recon = compose(&LayerSet::new(layers.clone(), op)?)?;
    Ok(Separation { layers, recon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_in_memory, RenderConfig};

    fn tiny_pools(n_layers: usize) -> Pools {
        let cfg = RenderConfig {
            image_size: 16,
            n_train: 12,
            n_test: 2,
            n_layers,
            size_range: (4, 8),
            ..RenderConfig::default()
        };
        let (train, test) = render_in_memory(&cfg, Exec::default()).unwrap();
        Pools::from_scenes(&train, &test).unwrap()
    }

    fn tiny_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            max_steps: steps,
            network: Some(NetworkProfile::synthetic_mini()),
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn part_params(state: &TrainState, gen: bool) -> ModelParams {
        state
            .model
            .params
            .filter(|n| nn::parse_name(n).unwrap().1.is_generator() == gen)
    }

    #[test]
    fn phases_touch_only_their_own_parameters() {
        let pools = tiny_pools(2);
        let cfg = tiny_cfg(1);
        let mut state = TrainState::init(cfg.resolve_profile(RangeTag::Unit), 2, 0).unwrap();
        for step in 0..3 {
            let input = StepInput::from_batch(&batch_for_step(&pools, &cfg, step).unwrap(), 2).unwrap();
            let (g0, d0) = (part_params(&state, true), part_params(&state, false));
            let gen = generator_phase(&mut state, &input, &cfg, Exec::default()).unwrap();
            let (g1, d1) = (part_params(&state, true), part_params(&state, false));
            assert_eq!(d1, d0);
            assert_ne!(g1, g0);
            discriminator_phase(&mut state, &input, &gen.fakes, &cfg, Exec::default()).unwrap();
            assert_eq!(part_params(&state, true), g1);
            assert_ne!(part_params(&state, false), d1);
        }
    }

    #[test]
    fn all_zero_weights_make_a_step_a_no_op() {
        let pools = tiny_pools(2);
        let cfg = TrainConfig {
            weights: LossWeights::default().zeroed(),
            gp_coefficient: 0.0,
            ..tiny_cfg(1)
        };
        let mut state = TrainState::init(cfg.resolve_profile(RangeTag::Unit), 2, 0).unwrap();
        let before = state.model.params.clone();
        let batch = batch_for_step(&pools, &cfg, 0).unwrap();
        let rec = train_step(&mut state, &batch, &cfg, Exec::default()).unwrap();
        assert_eq!(state.model.params, before);
        assert_eq!(state.step, 1);
        assert_eq!(rec.report.total, 0.0);
    }

    #[test]
    fn report_total_is_consistent_and_scores_bounded() {
        let pools = tiny_pools(2);
        let cfg = tiny_cfg(5);
        let out = train(&cfg, &pools, None, None, Exec::default()).unwrap();
        assert_eq!(out.records.len(), 5);
        for r in &out.records {
            assert!(r.is_finite());
            assert!((r.report.total - r.report.weighted_total(&cfg.weights)).abs() < 1e-6);
            for s in r.d_real.iter().chain(&r.d_fake) {
                assert!(*s > 0.0 && *s < 1.0);
            }
        }
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let pools = tiny_pools(2);
        let cfg = tiny_cfg(0);
        let out = train(&cfg, &pools, Some(dir.path()), None, Exec::default()).unwrap();
        let ck = Checkpoint::load(out.checkpoint.as_ref().unwrap()).unwrap();
        let fresh = TrainState::init(cfg.resolve_profile(RangeTag::Unit), 2, cfg.seed).unwrap();
        assert_eq!(ck.params, fresh.model.params);
        assert_eq!(ck.step, 0);
        let (header, rows) = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(header, log_header(2));
        assert!(rows.is_empty());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let pools = tiny_pools(2);
        let full = train(&tiny_cfg(6), &pools, None, None, Exec::default()).unwrap();

        let first = train(&tiny_cfg(3), &pools, Some(dir.path()), None, Exec::default()).unwrap();
        let ck = Checkpoint::load(first.checkpoint.as_ref().unwrap()).unwrap();
        let (state, cfg) = TrainState::from_checkpoint(ck).unwrap();
        assert_eq!(cfg, tiny_cfg(3));
        let rest = train(&tiny_cfg(6), &pools, Some(dir.path()), Some(state), Exec::default()).unwrap();

        assert_eq!(rest.state.model.params, full.state.model.params);
        assert_eq!(rest.state.step, 6);
        assert_eq!(rest.records, full.records[3..].to_vec());
        let (_, rows) = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.last().unwrap(), &full.records[5].values());
    }

    #[test]
    fn gradient_penalty_matches_finite_differences() {
        let model = Model::build(NetworkProfile::synthetic_mini(), 2, 11).unwrap();
        let mut rng = seed::rng(3, "gp", 0);
        let x = Tensor::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let gp = gradient_penalty(&model, 0, &x, 10.0, Exec::default()).unwrap();

        // squared norm of the score's input gradient by central differences
        let eps = 1e-5;
        let mut norm2 = 0.0;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let d = (model.discriminate(Exec::Sequential, 0, &p).unwrap()[0]
                - model.discriminate(Exec::Sequential, 0, &m).unwrap()[0])
                / (2.0 * eps);
            norm2 += d * d;
        }
        assert!(norm2 > 0.0);
        assert!(((gp - 10.0 * norm2) / (10.0 * norm2)).abs() < 1e-2, "{gp} vs {}", 10.0 * norm2);
        assert_eq!(gradient_penalty(&model, 0, &x, 0.0, Exec::default()).unwrap(), 0.0);
    }

    #[test]
    fn constant_discriminator_has_no_penalty() {
        let mut model = Model::build(NetworkProfile::synthetic_mini(), 2, 0).unwrap();
        let names: Vec<String> = model.params.names().filter(|n| n.contains("discriminator") && n.ends_with("weight")).map(str::to_owned).collect();
        for n in names {
            model.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::full([2, 3, 8, 8], 0.5);
        assert_eq!(gradient_penalty(&model, 0, &x, 10.0, Exec::default()).unwrap(), 0.0);
    }

    #[test]
    fn three_layer_training_and_separation() {
        let pools = tiny_pools(3);
        let cfg = TrainConfig {
            n_layers: 3,
            ..tiny_cfg(2)
        };
        let out = train(&cfg, &pools, None, None, Exec::default()).unwrap();
        assert_eq!(out.state.model.n_layers, 3);
        let discs = out
            .state
            .model
            .params
            .names()
            .filter(|n| n.ends_with("logit.weight"))
            .count();
        assert_eq!(discs, 3);
        let r = &out.records[1].report;
        assert_eq!((r.gan.len(), r.cc.len()), (3, 3));
        let sep = separate(&out.state.model, &pools.test[0].x, CompositeOp::AdditiveClipped, Exec::default()).unwrap();
        assert_eq!(sep.layers.len(), 3);
        assert_eq!(log_header(3)[2..5], ["gan_y", "gan_z", "gan_w"]);
    }

    #[test]
    fn separation_is_deterministic_and_checks_profile() {
        let pools = tiny_pools(2);
        let state = TrainState::init(NetworkProfile::synthetic_mini(), 2, 0).unwrap();
        let x = &pools.test[0].x;
        let a = separate(&state.model, x, CompositeOp::AdditiveClipped, Exec::default()).unwrap();
        let b = separate(&state.model, x, CompositeOp::AdditiveClipped, Exec::default()).unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.layers.len(), 2);
        let odd = Image::filled(12, 12, 3, 0.5, RangeTag::Unit).unwrap();
        assert!(matches!(
            separate(&state.model, &odd, CompositeOp::AdditiveClipped, Exec::default()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn triplet_batches_are_refused() {
        let pools = tiny_pools(2);
        let cfg = tiny_cfg(1);
        let mut state = TrainState::init(NetworkProfile::synthetic_mini(), 2, 0).unwrap();
        let mut batch = batch_for_step(&pools, &cfg, 0).unwrap();
        batch[0].layers[0].scene_id = batch[0].x.scene_id.clone();
        assert!(matches!(train_step(&mut state, &batch, &cfg, Exec::default()), Err(Error::Sampling(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { n_layers: 1, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { gp_coefficient: -1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        }
    }
}
