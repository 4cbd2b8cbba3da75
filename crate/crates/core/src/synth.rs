//! Deterministic renderer for the flat-shape synthetic dataset.
//!
//! Layer `k` holds exactly one shape of kind `k` (square, circle, triangle)
//! on a black background; the input is the clipped additive blend of the
//! layers. Brightness levels are drawn on the 8-bit grid so a stored blend
//! equals the blend of the stored layers byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{compose, CompositeOp, Image, LayerSet, RangeTag};
use crate::manifest::{Manifest, SceneEntry, Split, DOMAIN_NAMES, MANIFEST_VERSION};
use crate::seed;

const MAX_PLACEMENT_TRIES: usize = 64;
const AA_SAMPLES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    /// The kind rendered into layer `k`.
    pub fn for_layer(k: usize) -> ShapeKind {
        [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle][k]
    }
}

/// One filled shape inside its `size x size` bounding box at `(left, top)`.
/// Triangles are isoceles with the apex at the top centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub left: usize,
    pub top: usize,
    pub size: usize,
    pub brightness: f64,
}

impl ShapeSpec {
    pub fn center(&self) -> (f64, f64) {
        let half = self.size as f64 / 2.0;
        (self.left as f64 + half, self.top as f64 + half)
    }

    pub fn fits(&self, image_size: usize) -> bool {
        self.size > 0 && self.left + self.size <= image_size && self.top + self.size <= image_size
    }

    /// Whether the point `(u, v)` in continuous pixel coordinates is inside.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (l, t, s) = (self.left as f64, self.top as f64, self.size as f64);
        if u < l || v < t || u >= l + s || v >= t + s {
            return false;
        }
        let (cx, cy) = self.center();
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (u - cx).powi(2) + (v - cy).powi(2) <= r * r
            }
            ShapeKind::Triangle => (u - cx).abs() <= (v - t) / 2.0,
        }
    }

    /// Whether the centre of pixel `(px, py)` is inside.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        self.contains(px as f64 + 0.5, py as f64 + 0.5)
    }

    fn coverage(&self, px: usize, py: usize, antialias: bool) -> f64 {
        if !antialias {
            return if self.covers(px, py) { 1.0 } else { 0.0 };
        }
        let step = 1.0 / AA_SAMPLES as f64;
        let mut hits = 0;
        for sy in 0..AA_SAMPLES {
            for sx in 0..AA_SAMPLES {
                let u = px as f64 + (sx as f64 + 0.5) * step;
                let v = py as f64 + (sy as f64 + 0.5) * step;
                if self.contains(u, v) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (AA_SAMPLES * AA_SAMPLES) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_layers: usize,
    pub seed: u64,
    /// Inclusive bounding-box side range in pixels.
    pub size_range: (usize, usize),
    pub brightness_range: (f64, f64),
    pub channels: usize,
    pub antialias: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            image_size: 128,
            n_train: 4000,
            n_test: 1000,
            n_layers: 2,
            seed: 0,
            size_range: (16, 64),
            brightness_range: (0.3, 1.0),
            channels: 3,
            antialias: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if !(2..=3).contains(&self.n_layers) {
            return bad(format!("n_layers must be 2 or 3, got {}", self.n_layers));
        }
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi {
            return bad(format!("size_range {lo}..={hi} is empty or starts at 0"));
        }
        let (blo, bhi) = self.brightness_range;
        if !(blo > 0.0 && blo <= bhi && bhi <= 1.0) {
            return bad(format!("brightness_range ({blo}, {bhi}) must lie in (0, 1]"));
        }
        if level_bounds(self.brightness_range).is_none() {
            return bad(format!(
                "brightness_range ({blo}, {bhi}) holds no 8-bit level"
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        Ok(())
    }
}

fn level_bounds((lo, hi): (f64, f64)) -> Option<(u32, u32)> {
    let a = ((lo * 255.0).ceil() as u32).max(1);
    let b = (hi * 255.0).floor() as u32;
    (a <= b).then_some((a, b))
}

/// A rendered scene: the blend, its layers and the shapes behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub x: Image,
    pub layers: Vec<Image>,
    pub shapes: Vec<ShapeSpec>,
}

fn sample_shape<R: Rng>(kind: ShapeKind, cfg: &RenderConfig, rng: &mut R) -> Result<ShapeSpec> {
    let (lo, hi) = cfg.size_range;
    let (blo, bhi) = level_bounds(cfg.brightness_range).expect("validated");
    for _ in 0..MAX_PLACEMENT_TRIES {
        let size = rng.random_range(lo..=hi);
        if size > cfg.image_size {
            continue;
        }
        let left = rng.random_range(0..=cfg.image_size - size);
        let top = rng.random_range(0..=cfg.image_size - size);
        let brightness = rng.random_range(blo..=bhi) as f64 / 255.0;
        let spec = ShapeSpec {
            kind,
            left,
            top,
            size,
            brightness,
        };
        debug_assert!(spec.fits(cfg.image_size));
        return Ok(spec);
    }
    Err(Error::Render(format!(
        "no {kind:?} with size in {lo}..={hi} fits a {0}x{0} image after {MAX_PLACEMENT_TRIES} tries",
        cfg.image_size
    )))
}

/// Rasterizes one shape onto a black canvas.
pub fn rasterize(spec: &ShapeSpec, image_size: usize, channels: usize, antialias: bool) -> Image {
    let n = image_size * image_size;
    let mut plane = vec![0.0; n];
    for py in spec.top..spec.top + spec.size {
        for px in spec.left..spec.left + spec.size {
            plane[py * image_size + px] = spec.brightness * spec.coverage(px, py, antialias);
        }
    }
    let mut data = Vec::with_capacity(n * channels);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Image::new(image_size, image_size, channels, data, RangeTag::Unit).expect("valid raster")
}

pub fn render_scene(scene_seed: u64, cfg: &RenderConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = seed::rng(scene_seed, "render-scene", 0);
    let shapes = (0..cfg.n_layers)
        .map(|k| sample_shape(ShapeKind::for_layer(k), cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let layers: Vec<Image> = shapes
        .iter()
        .map(|s| rasterize(s, cfg.image_size, cfg.channels, cfg.antialias))
        .collect();
    let x = compose(&LayerSet::new(layers.clone(), CompositeOp::AdditiveClipped)?)?;
    Ok(Scene { x, layers, shapes })
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:06}")
}

pub fn scene_seed(cfg: &RenderConfig, index: usize) -> u64 {
    seed::derive_seed(cfg.seed, "scene", index as u64)
}

/// Renders scene `index` of the dataset described by `cfg`.
pub fn render_indexed(cfg: &RenderConfig, index: usize) -> Result<Scene> {
    render_scene(scene_seed(cfg, index), cfg)
}

/// Renders train and test splits in memory. Scene ids run on across splits.
pub fn render_in_memory(cfg: &RenderConfig, exec: Exec) -> Result<(Vec<(String, Scene)>, Vec<(String, Scene)>)> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_test;
    let mut all = exec
        .map_range(total, |i| render_indexed(cfg, i).map(|s| (scene_id(i), s)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(cfg.n_train);
    Ok((all, test))
}

/// Writes `out_dir/{train,test}/{x,y,z[,w]}/scene_NNNNNN.png` and `manifest.json`.
pub fn render_dataset(cfg: &RenderConfig, out_dir: &Path, exec: Exec) -> Result<Manifest> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_test;
    let domains = &DOMAIN_NAMES[..=cfg.n_layers];
    let entries = exec
        .map_range(total, |i| -> Result<SceneEntry> {
            let scene = render_indexed(cfg, i)?;
            let id = scene_id(i);
            let split = if i < cfg.n_train { Split::Train } else { Split::Test };
            let split_dir = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let mut files = BTreeMap::new();
            let images = std::iter::once(&scene.x).chain(&scene.layers);
            for (domain, img) in domains.iter().zip(images) {
                let rel = format!("{split_dir}/{domain}/{id}.png");
                img.save_png(&out_dir.join(&rel), 8)?;
                files.insert(domain.to_string(), rel);
            }
            Ok(SceneEntry {
                id,
                split,
                scene_group: None,
                subset: None,
                files,
                shapes: scene.shapes,
                seed: Some(scene_seed(cfg, i)),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        n_layers: cfg.n_layers,
        composite: CompositeOp::AdditiveClipped,
        image_size: Some(cfg.image_size),
        seed: Some(cfg.seed),
        scenes: entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
