//! Image error metrics and dataset evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TestScene;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{from_log_domain, CompositeOp, Image, RangeTag};
use crate::manifest::DOMAIN_NAMES;
use crate::nn::Model;
use crate::train::separate;

pub const PSNR_CAP: f64 = 99.0;
pub const LMSE_WINDOW: usize = 20;
pub const LMSE_STRIDE: usize = 10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair(pred: &Image, gt: &Image) -> Result<()> {
    if !pred.same_dims(gt) {
        return Err(Error::InvalidInput(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Mean squared error, times 100 when `scale100` is set.
pub fn mse(pred: &Image, gt: &Image, scale100: bool) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.range() != gt.range() {
        return Err(Error::InvalidInput(format!(
            "range tags differ: {:?} vs {:?}",
            pred.range(),
            gt.range()
        )));
    }
    let n = pred.data().len() as f64;
    let e = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(if scale100 { 100.0 * e } else { e })
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`] for a near-exact match.
pub fn psnr(pred: &Image, gt: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidConfig(format!("psnr peak must be positive, got {peak}")));
    }
    check_pair(pred, gt)?;
    let n = pred.data().len() as f64;
    let e = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(e, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

/// Locally scale-invariant MSE: each window's prediction is rescaled by its
/// least-squares optimal factor, and the summed residual is normalized by
/// the summed ground-truth energy of the same windows. Channels are scored
/// separately and averaged.
pub fn lmse(pred: &Image, gt: &Image, window: usize, stride: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w, c) = gt.dims();
    if window == 0 || stride == 0 {
        return Err(Error::InvalidConfig("lmse window and stride must be positive".into()));
    }
    if window > h || window > w {
        return Err(Error::InvalidInput(format!(
            "lmse window {window} exceeds the {h}x{w} image"
        )));
    }
    let mut total = 0.0;
    for ch in 0..c {
        let (p, g) = (pred.plane(ch), gt.plane(ch));
        let (mut err, mut energy) = (0.0, 0.0);
        for top in (0..=h - window).step_by(stride) {
            for left in (0..=w - window).step_by(stride) {
                let (mut pg, mut pp, mut gg) = (0.0, 0.0, 0.0);
                for y in top..top + window {
                    for x in left..left + window {
                        let (a, b) = (p[y * w + x], g[y * w + x]);
                        pg += a * b;
                        pp += a * a;
                        gg += b * b;
                    }
                }
                let scale = if pp > 1e-12 { pg / pp } else { 0.0 };
                // sum (g - s p)^2 expanded
                err += (gg - 2.0 * scale * pg + scale * scale * pp).max(0.0);
                energy += gg;
            }
        }
        total += if energy > 0.0 { err / energy } else { 0.0 };
    }
    Ok(total / c as f64)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: SSIM_WINDOW,
            sigma: SSIM_SIGMA,
            peak: 1.0,
        }
    }
}

/// Mean local SSIM over valid Gaussian windows, averaged over channels.
pub fn ssim(pred: &Image, gt: &Image, params: &SsimParams) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w, c) = gt.dims();
    if h < params.window || w < params.window {
        return Err(Error::InvalidInput(format!(
            "ssim window {} exceeds the {h}x{w} image",
            params.window
        )));
    }
    if !(params.peak > 0.0 && params.sigma > 0.0) || params.window == 0 {
        return Err(Error::InvalidConfig("ssim needs positive window, sigma and peak".into()));
    }
    let k = gaussian_kernel(params.window, params.sigma);
    let c1 = (0.01 * params.peak).powi(2);
    let c2 = (0.03 * params.peak).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let (a, b) = (pred.plane(ch), gt.plane(ch));
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        let (ma, mb) = (filter(a, h, w, &k), filter(b, h, w, &k));
        let (saa, sbb, sab) = (filter(&aa, h, w, &k), filter(&bb, h, w, &k), filter(&ab, h, w, &k));
        let mut sum = 0.0;
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += sum / ma.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Mse100,
    Lmse,
    Psnr,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Mse, Metric::Mse100, Metric::Lmse, Metric::Psnr, Metric::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Mse100 => "mse100",
            Metric::Lmse => "lmse",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub lmse_window: usize,
    pub lmse_stride: usize,
    pub ssim: SsimParams,
    pub psnr_peak: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metrics: Metric::ALL.to_vec(),
            lmse_window: LMSE_WINDOW,
            lmse_stride: LMSE_STRIDE,
            ssim: SsimParams::default(),
            psnr_peak: 1.0,
        }
    }
}

impl EvalOptions {
    pub fn score(&self, metric: Metric, pred: &Image, gt: &Image) -> Result<f64> {
        match metric {
            Metric::Mse => mse(pred, gt, false),
            Metric::Mse100 => mse(pred, gt, true),
            Metric::Lmse => lmse(pred, gt, self.lmse_window, self.lmse_stride),
            Metric::Psnr => psnr(pred, gt, self.psnr_peak),
            Metric::Ssim => ssim(pred, gt, &self.ssim),
        }
    }
}

/// Produces one predicted layer per stream for a test scene.
pub trait Predictor: Sync {
    fn predict(&self, scene: &TestScene) -> Result<Vec<Option<Image>>>;
}

/// Returns the ground truth itself; every error metric must come out 0.
pub struct IdentityOracle;

impl Predictor for IdentityOracle {
    fn predict(&self, scene: &TestScene) -> Result<Vec<Option<Image>>> {
        Ok(scene.layers.clone())
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub op: CompositeOp,
    pub exec: Exec,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, scene: &TestScene) -> Result<Vec<Option<Image>>> {
        let sep = separate(self.model, &scene.x, self.op, self.exec)?;
        Ok(sep.layers.into_iter().map(Some).collect())
    }
}

/// Brings an image to displayable intensity before scoring.
fn to_image_space(img: &Image) -> Result<Image> {
    match img.range() {
        RangeTag::Log => from_log_domain(img),
        RangeTag::Linear => Ok(img.clamped_unit()),
        RangeTag::Unit => Ok(img.clone()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub scene_id: String,
    pub layer: String,
    pub values: BTreeMap<Metric, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    /// Scene/layer pairs without ground truth.
    pub skipped: usize,
    /// `per_layer[layer][metric]`, averaged over scored samples.
    pub per_layer: BTreeMap<String, BTreeMap<Metric, f64>>,
    /// Mean of the per-layer averages.
    pub mean: BTreeMap<Metric, f64>,
    #[serde(skip)]
    pub samples: Vec<SampleScore>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn write_samples_csv(&self, path: &Path) -> Result<()> {
        let metrics: Vec<Metric> = self.mean.keys().copied().collect();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["scene_id".to_string(), "layer".into()];
        header.extend(metrics.iter().map(|m| m.name().to_string()));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.scene_id.clone(), s.layer.clone()];
            row.extend(metrics.iter().map(|m| s.values[m].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Plain-text table with one row per layer and a mean row.
    pub fn table(&self) -> String {
        let metrics: Vec<Metric> = self.mean.keys().copied().collect();
        let mut out = format!("{:<8}", "layer");
        for m in &metrics {
            out += &format!("{:>12}", m.name());
        }
        out.push('\n');
        let rows = self
            .per_layer
            .iter()
            .map(|(l, v)| (l.as_str(), v))
            .chain(std::iter::once(("mean", &self.mean)));
        for (name, values) in rows {
            out += &format!("{name:<8}");
            for m in &metrics {
                out += &format!("{:>12.6}", values[m]);
            }
            out.push('\n');
        }
        out += &format!("{} scored, {} skipped\n", self.n_samples, self.skipped);
        out
    }
}

/// Scores every predicted layer of every test scene against its ground
/// truth. Log-domain images are scored after conversion to intensity.
pub fn evaluate_dataset(predictor: &dyn Predictor, scenes: &[TestScene], opts: &EvalOptions, exec: Exec) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no test scenes to evaluate".into()));
    }
    if opts.metrics.is_empty() {
        return Err(Error::InvalidConfig("no metrics requested".into()));
    }
    let per_scene: Vec<Result<(Vec<SampleScore>, usize)>> = exec.map_slice(scenes, |scene| {
        let preds = predictor.predict(scene)?;
        let mut scores = Vec::new();
        let mut skipped = 0;
        for (k, gt) in scene.layers.iter().enumerate() {
            let (Some(gt), Some(Some(pred))) = (gt, preds.get(k)) else {
                skipped += 1;
                continue;
            };
            let (gt, pred) = (to_image_space(gt)?, to_image_space(pred)?);
            let mut values = BTreeMap::new();
            for &m in &opts.metrics {
                values.insert(m, opts.score(m, &pred, &gt)?);
            }
            scores.push(SampleScore {
                scene_id: scene.scene_id.clone(),
                layer: DOMAIN_NAMES[k + 1].to_string(),
                values,
            });
        }
        Ok((scores, skipped))
    });
    let mut samples = Vec::new();
    let mut skipped = 0;
    for r in per_scene {
        let (s, k) = r?;
        samples.extend(s);
        skipped += k;
    }
    if skipped > 0 {
        log::warn!("{skipped} scene layers had no ground truth and were skipped");
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no scene has ground-truth layers".into()));
    }
    let mut sums: BTreeMap<String, (BTreeMap<Metric, f64>, usize)> = BTreeMap::new();
    for s in &samples {
        let e = sums.entry(s.layer.clone()).or_default();
        e.1 += 1;
        for (m, v) in &s.values {
            *e.0.entry(*m).or_default() += v;
        }
    }
    let per_layer: BTreeMap<String, BTreeMap<Metric, f64>> = sums
        .into_iter()
        .map(|(l, (v, n))| (l, v.into_iter().map(|(m, s)| (m, s / n as f64)).collect()))
        .collect();
    let mean = opts
        .metrics
        .iter()
        .map(|&m| {
            let v = per_layer.values().map(|l| l[&m]).sum::<f64>() / per_layer.len() as f64;
            (m, v)
        })
        .collect();
    Ok(MetricsReport {
        n_samples: samples.len(),
        skipped,
        per_layer,
        mean,
        samples,
    })
}
