//! Unpaired domain pools, non-triplet batch sampling, dataset splitting and
//! augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{to_log_domain, Image, RangeTag, LOG_EPSILON};
use crate::manifest::{Manifest, SceneEntry, Split, DOMAIN_NAMES};
use crate::seed;
use crate::synth::Scene;

const MAX_REJECTIONS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    /// The blended input.
    X,
    /// Layer `k` (`y`, `z`, then extra layers).
    Layer(usize),
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::X => DOMAIN_NAMES[0],
            Domain::Layer(k) => DOMAIN_NAMES[k + 1],
        }
    }

    pub fn from_name(name: &str) -> Option<Domain> {
        let i = DOMAIN_NAMES.iter().position(|d| *d == name)?;
        Some(if i == 0 { Domain::X } else { Domain::Layer(i - 1) })
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub image: Image,
    pub domain: Domain,
    pub scene_id: String,
}

impl DomainSample {
    pub fn new(image: Image, domain: Domain, scene_id: impl Into<String>) -> Result<Self> {
        let scene_id = scene_id.into();
        if scene_id.is_empty() {
            return Err(Error::InvalidInput("sample with empty scene id".into()));
        }
        Ok(DomainSample {
            image,
            domain,
            scene_id,
        })
    }
}

/// A test scene: the blend with whatever ground-truth layers exist.
#[derive(Clone, Debug, PartialEq)]
pub struct TestScene {
    pub scene_id: String,
    pub x: Image,
    pub layers: Vec<Option<Image>>,
}

/// Training pools per domain plus a held-out test pool.
#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub inputs: Vec<DomainSample>,
    /// One pool per layer domain.
    pub layers: Vec<Vec<DomainSample>>,
    pub test: Vec<TestScene>,
}

impl Pools {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.len() != n_layers {
            return Err(Error::InvalidInput(format!(
                "pools hold {} layer domains, expected {n_layers}",
                self.layers.len()
            )));
        }
        if self.inputs.is_empty() {
            return Err(Error::InvalidInput("input pool is empty".into()));
        }
        for (k, pool) in self.layers.iter().enumerate() {
            if pool.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "layer pool {} is empty",
                    Domain::Layer(k)
                )));
            }
        }
        Ok(())
    }

    /// Training pools from rendered scenes; every scene contributes its
    /// blend and all of its layers, and the sampler keeps them apart.
    pub fn from_scenes(train: &[(String, Scene)], test: &[(String, Scene)]) -> Result<Pools> {
        let n_layers = train
            .first()
            .map(|(_, s)| s.layers.len())
            .ok_or_else(|| Error::InvalidInput("no training scenes".into()))?;
        let mut pools = Pools {
            layers: vec![Vec::new(); n_layers],
            ..Pools::default()
        };
        for (id, s) in train {
            pools.inputs.push(DomainSample::new(s.x.clone(), Domain::X, id)?);
            for (k, l) in s.layers.iter().enumerate() {
                pools.layers[k].push(DomainSample::new(l.clone(), Domain::Layer(k), id)?);
            }
        }
        pools.test = test
            .iter()
            .map(|(id, s)| TestScene {
                scene_id: id.clone(),
                x: s.x.clone(),
                layers: s.layers.iter().cloned().map(Some).collect(),
            })
            .collect();
        Ok(pools)
    }
}

/// One training example: a blend and one sample per layer domain, never
/// drawn from the blend's own scene.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: DomainSample,
    pub layers: Vec<DomainSample>,
}

impl Batch {
    pub fn y(&self) -> &DomainSample {
        &self.layers[0]
    }

    pub fn z(&self) -> &DomainSample {
        &self.layers[1]
    }

    pub fn is_non_triplet(&self) -> bool {
        self.layers.iter().all(|l| l.scene_id != self.x.scene_id)
    }
}

/// Draws a batch uniformly; a layer sample that shares the blend's scene
/// is redrawn.
pub fn sample_batch(pools: &Pools, rng_seed: u64) -> Result<Batch> {
    if pools.inputs.is_empty() || pools.layers.iter().any(Vec::is_empty) || pools.layers.is_empty() {
        return Err(Error::Sampling("every pool must be non-empty".into()));
    }
    let mut rng = seed::rng(rng_seed, "batch", 0);
    let x = &pools.inputs[rng.random_range(0..pools.inputs.len())];
    let mut layers = Vec::with_capacity(pools.layers.len());
    for (k, pool) in pools.layers.iter().enumerate() {
        let mut picked = None;
        for _ in 0..MAX_REJECTIONS {
            let cand = &pool[rng.random_range(0..pool.len())];
            if cand.scene_id != x.scene_id {
                picked = Some(cand);
                break;
            }
        }
        let cand = picked.ok_or_else(|| {
            Error::Sampling(format!(
                "no {} sample outside scene {} after {MAX_REJECTIONS} draws (pool size {})",
                Domain::Layer(k),
                x.scene_id,
                pool.len()
            ))
        })?;
        layers.push(cand.clone());
    }
    Ok(Batch { x: x.clone(), layers })
}

/// Deterministic stream of batches: batch `i` depends only on `(seed, i)`.
pub struct BatchSampler<'a> {
    pools: &'a Pools,
    seed: u64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(pools: &'a Pools, seed: u64) -> Self {
        BatchSampler { pools, seed }
    }

    pub fn batch(&self, index: u64) -> Result<Batch> {
        sample_batch(self.pools, seed::derive_seed(self.seed, "batch-stream", index))
    }
}

/// Scene group and optional pinned subset for a scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneGroup {
    pub group: String,
    pub subset: Option<u8>,
}

/// Disjoint-scene split: inputs come from subset 1 only; layer samples and
/// test scenes from subset 2 only.
#[derive(Clone, Debug)]
pub struct NonTripletSplit {
    pub subset1_groups: BTreeSet<String>,
    pub subset2_groups: BTreeSet<String>,
    pub input_pool: Vec<DomainSample>,
    pub layer_pool: Vec<DomainSample>,
    /// Every subset-2 record (blends and layers), for ground-truth scoring.
    pub test_pool: Vec<DomainSample>,
}

impl NonTripletSplit {
    pub fn into_pools(self, n_layers: usize) -> Result<Pools> {
        let mut layers = vec![Vec::new(); n_layers];
        for s in self.layer_pool {
            if let Domain::Layer(k) = s.domain {
                if k < n_layers {
                    layers[k].push(s);
                }
            }
        }
        let mut scenes: BTreeMap<String, TestScene> = BTreeMap::new();
        let mut blends = BTreeMap::new();
        for s in &self.test_pool {
            if s.domain == Domain::X {
                blends.insert(s.scene_id.clone(), s.image.clone());
            }
        }
        for (id, x) in blends {
            scenes.insert(
                id.clone(),
                TestScene {
                    scene_id: id,
                    x,
                    layers: vec![None; n_layers],
                },
            );
        }
        for s in self.test_pool {
            if let (Domain::Layer(k), Some(t)) = (s.domain, scenes.get_mut(&s.scene_id)) {
                if k < n_layers {
                    t.layers[k] = Some(s.image);
                }
            }
        }
        Ok(Pools {
            inputs: self.input_pool,
            layers,
            test: scenes.into_values().collect(),
        })
    }
}

/// Splits records into two subsets with no scene group in common.
///
/// Groups with a pinned subset keep it; the rest are assigned in name order
/// to subset 1 until it holds at least half of the records.
pub fn split_non_triplet(
    records: Vec<DomainSample>,
    scene_groups: &BTreeMap<String, SceneGroup>,
) -> Result<NonTripletSplit> {
    let mut group_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pinned: BTreeMap<&str, u8> = BTreeMap::new();
    for r in &records {
        let g = scene_groups.get(&r.scene_id).ok_or_else(|| {
            Error::Split(format!("scene {} has no scene group", r.scene_id))
        })?;
        *group_sizes.entry(&g.group).or_default() += 1;
        if let Some(sub) = g.subset {
            if sub != 1 && sub != 2 {
                return Err(Error::Split(format!("scene {} pins subset {sub}", r.scene_id)));
            }
            match pinned.insert(&g.group, sub) {
                Some(prev) if prev != sub => {
                    return Err(Error::Split(format!(
                        "scene group {} spans both subsets",
                        g.group
                    )))
                }
                _ => {}
            }
        }
    }
    if group_sizes.len() < 2 {
        return Err(Error::Split(format!(
            "need at least two scene groups, found {}",
            group_sizes.len()
        )));
    }

    let total: usize = group_sizes.values().sum();
    let mut subset1 = BTreeSet::new();
    let mut subset2 = BTreeSet::new();
    let mut count1 = 0;
    for (g, &sub) in &pinned {
        if sub == 1 {
            subset1.insert(g.to_string());
            count1 += group_sizes[g];
        } else {
            subset2.insert(g.to_string());
        }
    }
    let free: Vec<&str> = group_sizes
        .keys()
        .copied()
        .filter(|g| !pinned.contains_key(g))
        .collect();
    for (i, g) in free.iter().enumerate() {
        let remaining = free.len() - i;
        let must_fill_2 = subset2.is_empty() && remaining == 1;
        if !must_fill_2 && (2 * count1 < total || subset1.is_empty()) {
            subset1.insert(g.to_string());
            count1 += group_sizes[g];
        } else {
            subset2.insert(g.to_string());
        }
    }
    if subset1.is_empty() || subset2.is_empty() {
        return Err(Error::Split("one subset ended up empty".into()));
    }

    let mut input_pool = Vec::new();
    let mut layer_pool = Vec::new();
    let mut test_pool = Vec::new();
    for r in records {
        let g = &scene_groups[&r.scene_id].group;
        if subset1.contains(g) {
            if r.domain == Domain::X {
                input_pool.push(r);
            }
        } else {
            if matches!(r.domain, Domain::Layer(_)) {
                layer_pool.push(r.clone());
            }
            test_pool.push(r);
        }
    }
    Ok(NonTripletSplit {
        subset1_groups: subset1,
        subset2_groups: subset2,
        input_pool,
        layer_pool,
        test_pool,
    })
}

/// Loads one manifest image in the manifest's working range.
pub fn load_image(manifest: &Manifest, dir: &Path, rel: &str) -> Result<Image> {
    let img = Image::load_png(&dir.join(rel))?.to_rgb();
    match manifest.working_range() {
        RangeTag::Log => to_log_domain(&img, LOG_EPSILON),
        _ => Ok(img),
    }
}

fn entry_samples(manifest: &Manifest, dir: &Path, e: &SceneEntry) -> Result<Vec<DomainSample>> {
    e.files
        .iter()
        .filter_map(|(d, rel)| Domain::from_name(d).map(|dom| (dom, rel)))
        .map(|(dom, rel)| DomainSample::new(load_image(manifest, dir, rel)?, dom, &e.id))
        .collect()
}

/// Pools for a rendered dataset: train split feeds the samplers, test split
/// is held out.
pub fn load_split_pools(manifest: &Manifest, dir: &Path) -> Result<Pools> {
    let mut pools = Pools {
        layers: vec![Vec::new(); manifest.n_layers],
        ..Pools::default()
    };
    for e in &manifest.scenes {
        let samples = entry_samples(manifest, dir, e)?;
        match e.split {
            Split::Train => {
                for s in samples {
                    match s.domain {
                        Domain::X => pools.inputs.push(s),
                        Domain::Layer(k) if k < manifest.n_layers => pools.layers[k].push(s),
                        Domain::Layer(_) => {}
                    }
                }
            }
            Split::Test => {
                let mut x = None;
                let mut layers = vec![None; manifest.n_layers];
                for s in samples {
                    match s.domain {
                        Domain::X => x = Some(s.image),
                        Domain::Layer(k) if k < manifest.n_layers => layers[k] = Some(s.image),
                        Domain::Layer(_) => {}
                    }
                }
                if let Some(x) = x {
                    pools.test.push(TestScene {
                        scene_id: e.id.clone(),
                        x,
                        layers,
                    });
                }
            }
        }
    }
    Ok(pools)
}

/// Pools for a real dataset whose scenes carry `scene_group` fields.
pub fn load_grouped_pools(manifest: &Manifest, dir: &Path) -> Result<(Pools, NonTripletSplit)> {
    let (records, groups) = grouped_records(manifest, dir)?;
    let split = split_non_triplet(records, &groups)?;
    let pools = split.clone().into_pools(manifest.n_layers)?;
    Ok((pools, split))
}

pub fn grouped_records(
    manifest: &Manifest,
    dir: &Path,
) -> Result<(Vec<DomainSample>, BTreeMap<String, SceneGroup>)> {
    let mut records = Vec::new();
    let mut groups = BTreeMap::new();
    for e in &manifest.scenes {
        let group = e.scene_group.clone().ok_or_else(|| {
            Error::Split(format!("scene {} has no scene_group field", e.id))
        })?;
        groups.insert(
            e.id.clone(),
            SceneGroup {
                group,
                subset: e.subset,
            },
        );
        records.extend(entry_samples(manifest, dir, e)?);
    }
    Ok((records, groups))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Output `(height, width)`.
    pub target: (usize, usize),
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: false,
            target: (128, 128),
            scale_range: (0.8, 1.2),
            flip_prob: 0.5,
        }
    }
}

/// A concrete draw of the random geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub crop_top: usize,
    pub crop_left: usize,
    pub flip: bool,
}

fn scaled_dims(h: usize, w: usize, scale: f64, target: (usize, usize)) -> (usize, usize) {
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    (sh.max(target.0), sw.max(target.1))
}

pub fn sample_augment(img: &Image, rng_seed: u64, cfg: &AugmentConfig) -> AugmentParams {
    let mut rng = seed::rng(rng_seed, "augment", 0);
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (ph, pw) = scaled_dims(img.height(), img.width(), scale, cfg.target);
    let crop_top = rng.random_range(0..=ph - cfg.target.0);
    let crop_left = rng.random_range(0..=pw - cfg.target.1);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    AugmentParams {
        scale,
        crop_top,
        crop_left,
        flip,
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Bilinear rescale, reflect-pad to at least `target`, crop, then flip.
pub fn apply_augment(img: &Image, p: &AugmentParams, target: (usize, usize)) -> Result<Image> {
    let (h, w, c) = img.dims();
    let sh = ((h as f64 * p.scale).round() as usize).max(1);
    let sw = ((w as f64 * p.scale).round() as usize).max(1);
    let (ph, pw) = (sh.max(target.0), sw.max(target.1));
    if p.crop_top + target.0 > ph || p.crop_left + target.1 > pw {
        return Err(Error::InvalidInput(format!(
            "crop at ({}, {}) leaves the {ph}x{pw} padded image",
            p.crop_top, p.crop_left
        )));
    }
    let pad_top = (ph - sh) / 2;
    let pad_left = (pw - sw) / 2;
    let (ry, rx) = (h as f64 / sh as f64, w as f64 / sw as f64);
    let mut out = Vec::with_capacity(target.0 * target.1 * c);
    for ch in 0..c {
        let plane = img.plane(ch);
        for ty in 0..target.0 {
            let sy = reflect((ty + p.crop_top) as isize - pad_top as isize, sh);
            let fy = ((sy as f64 + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for tx in 0..target.1 {
                let col = if p.flip { target.1 - 1 - tx } else { tx };
                let sx = reflect((col + p.crop_left) as isize - pad_left as isize, sw);
                let fx = ((sx as f64 + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Image::new(target.0, target.1, c, out, img.range())
}

/// Random scale, crop and horizontal flip; the identity when disabled.
pub fn augment(img: &Image, rng_seed: u64, cfg: &AugmentConfig) -> Result<Image> {
    if !cfg.enabled {
        return Ok(img.clone());
    }
    let p = sample_augment(img, rng_seed, cfg);
    apply_augment(img, &p, cfg.target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_in_memory, RenderConfig};
    use crate::Exec;

    fn img_with(id: usize, h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| ((i * 7 + id * 13) % 97) as f64 / 96.0).collect();
        Image::new(h, w, 3, data, RangeTag::Unit).unwrap()
    }

    fn sample(domain: Domain, id: &str) -> DomainSample {
        DomainSample::new(img_with(id.len(), 4, 4), domain, id).unwrap()
    }

    fn small_pools(n: usize) -> Pools {
        let cfg = RenderConfig {
            image_size: 16,
            n_train: n,
            n_test: 2,
            size_range: (3, 8),
            ..RenderConfig::default()
        };
        let (train, test) = render_in_memory(&cfg, Exec::default()).unwrap();
        Pools::from_scenes(&train, &test).unwrap()
    }

    #[test]
    fn forced_batch_from_singleton_pools() {
        let pools = Pools {
            inputs: vec![sample(Domain::X, "a")],
            layers: vec![vec![sample(Domain::Layer(0), "b")], vec![sample(Domain::Layer(1), "c")]],
            test: vec![],
        };
        for s in 0..5 {
            let b = sample_batch(&pools, s).unwrap();
            assert_eq!(
                (b.x.scene_id.as_str(), b.y().scene_id.as_str(), b.z().scene_id.as_str()),
                ("a", "b", "c")
            );
        }
    }

    #[test]
    fn collision_only_pools_exhaust() {
        let pools = Pools {
            inputs: vec![sample(Domain::X, "a")],
            layers: vec![vec![sample(Domain::Layer(0), "a")], vec![sample(Domain::Layer(1), "c")]],
            test: vec![],
        };
        assert!(matches!(sample_batch(&pools, 0), Err(Error::Sampling(_))));
        let empty = Pools {
            layers: vec![vec![], vec![]],
            ..Pools::default()
        };
        assert!(matches!(sample_batch(&empty, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn sampler_is_deterministic_and_never_forms_triplets() {
        let pools = small_pools(20);
        let a = BatchSampler::new(&pools, 9);
        let b = BatchSampler::new(&pools, 9);
        for i in 0..500 {
            let (ba, bb) = (a.batch(i).unwrap(), b.batch(i).unwrap());
            assert!(ba.is_non_triplet());
            assert_eq!(ba.x.scene_id, bb.x.scene_id);
            assert_eq!(ba.y().scene_id, bb.y().scene_id);
            assert_eq!(ba.z().scene_id, bb.z().scene_id);
        }
    }

    #[test]
    fn draws_are_uniform_within_three_sigma() {
        // Chi-square oracle: each of n scenes should be drawn as x about
        // draws/n times; layers are uniform over the n-1 non-colliding scenes.
        let n = 20;
        let pools = small_pools(n);
        let sampler = BatchSampler::new(&pools, 1234);
        let draws = 10_000;
        let mut x_counts = BTreeMap::new();
        let mut y_counts = BTreeMap::new();
        for i in 0..draws {
            let b = sampler.batch(i).unwrap();
            *x_counts.entry(b.x.scene_id.clone()).or_insert(0usize) += 1;
            *y_counts.entry(b.y().scene_id.clone()).or_insert(0usize) += 1;
        }
        for counts in [&x_counts, &y_counts] {
            assert_eq!(counts.len(), n);
            let p = 1.0 / n as f64;
            let mean = draws as f64 * p;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let mut chi2 = 0.0;
            for &c in counts.values() {
                assert!((c as f64 - mean).abs() <= 3.0 * sigma + 1.0, "count {c} vs {mean}");
                chi2 += (c as f64 - mean).powi(2) / mean;
            }
            // 99.9% quantile of chi-square with 19 degrees of freedom
            assert!(chi2 < 43.82, "chi2 = {chi2}");
        }
    }

    fn grouped_records(n: usize, groups: usize) -> (Vec<DomainSample>, BTreeMap<String, SceneGroup>) {
        let mut records = Vec::new();
        let mut map = BTreeMap::new();
        for i in 0..n {
            let id = format!("s{i:03}");
            map.insert(
                id.clone(),
                SceneGroup {
                    group: format!("g{}", i % groups),
                    subset: None,
                },
            );
            for d in [Domain::X, Domain::Layer(0), Domain::Layer(1)] {
                records.push(DomainSample::new(img_with(i, 2, 2), d, &id).unwrap());
            }
        }
        (records, map)
    }

    #[test]
    fn two_groups_split_into_inputs_and_layers() {
        let (records, groups) = grouped_records(220, 2);
        let split = split_non_triplet(records, &groups).unwrap();
        assert_eq!(split.subset1_groups, BTreeSet::from(["g0".to_string()]));
        assert_eq!(split.subset2_groups, BTreeSet::from(["g1".to_string()]));
        let group_of = |id: &str| groups[id].group.clone();
        assert!(split.input_pool.iter().all(|s| group_of(&s.scene_id) == "g0" && s.domain == Domain::X));
        assert!(split.layer_pool.iter().all(|s| group_of(&s.scene_id) == "g1"));
        assert!(split.test_pool.iter().all(|s| group_of(&s.scene_id) == "g1"));
        assert_eq!(split.input_pool.len(), 110);
        assert!(split.subset1_groups.is_disjoint(&split.subset2_groups));

        let pools = split.into_pools(2).unwrap();
        assert_eq!(pools.test.len(), 110);
        assert!(pools.test.iter().all(|t| t.layers.iter().all(Option::is_some)));
    }

    #[test]
    fn single_group_cannot_split() {
        let (records, groups) = grouped_records(10, 1);
        assert!(matches!(split_non_triplet(records, &groups), Err(Error::Split(_))));
    }

    #[test]
    fn conflicting_pins_are_rejected() {
        let (records, mut groups) = grouped_records(10, 2);
        groups.get_mut("s000").unwrap().subset = Some(1);
        groups.get_mut("s002").unwrap().subset = Some(2);
        assert!(matches!(split_non_triplet(records, &groups), Err(Error::Split(_))));
    }

    #[test]
    fn missing_group_is_rejected() {
        let (records, mut groups) = grouped_records(4, 2);
        groups.remove("s001");
        assert!(matches!(split_non_triplet(records, &groups), Err(Error::Split(_))));
    }

    #[test]
    fn many_groups_never_share_scenes_across_subsets() {
        for g in 2..7 {
            let (records, groups) = grouped_records(30, g);
            let split = split_non_triplet(records, &groups).unwrap();
            let ids1: BTreeSet<_> = split.input_pool.iter().map(|s| &s.scene_id).collect();
            let ids2: BTreeSet<_> = split.layer_pool.iter().map(|s| &s.scene_id).collect();
            assert!(ids1.is_disjoint(&ids2));
            assert!(!ids1.is_empty() && !ids2.is_empty());
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = img_with(1, 6, 8);
        let p = AugmentParams {
            scale: 1.0,
            crop_top: 0,
            crop_left: 0,
            flip: true,
        };
        let once = apply_augment(&img, &p, (6, 8)).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_augment(&once, &p, (6, 8)).unwrap(), img);
    }

    #[test]
    fn unit_scale_centered_crop_is_identity() {
        let img = img_with(2, 7, 5);
        let p = AugmentParams {
            scale: 1.0,
            crop_top: 0,
            crop_left: 0,
            flip: false,
        };
        assert_eq!(apply_augment(&img, &p, (7, 5)).unwrap(), img);
    }

    #[test]
    fn output_always_matches_target() {
        let img = img_with(3, 20, 24);
        let cfg = AugmentConfig {
            enabled: true,
            target: (20, 20),
            ..AugmentConfig::default()
        };
        for s in 0..50 {
            let out = augment(&img, s, &cfg).unwrap();
            assert_eq!((out.height(), out.width()), (20, 20));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // downscaled below the crop target: reflect padding kicks in
        let p = AugmentParams {
            scale: 0.8,
            crop_top: 0,
            crop_left: 0,
            flip: false,
        };
        let out = apply_augment(&img, &p, (20, 24)).unwrap();
        assert_eq!((out.height(), out.width()), (20, 24));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = img_with(4, 8, 8);
        assert_eq!(augment(&img, 1, &AugmentConfig::default()).unwrap(), img);
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(5, 1), 0);
    }
}
