//! Latent-space export, PCA projection and cluster statistics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DomainSample, Pools};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{Image, RangeTag};
use crate::nn::Model;
use crate::seed;

pub const DEFAULT_SAMPLES: usize = 200;

/// Which encoder saw which domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LatentTag {
    YofX,
    YofY,
    ZofX,
    ZofZ,
}

impl LatentTag {
    pub const ALL: [LatentTag; 4] = [LatentTag::YofX, LatentTag::YofY, LatentTag::ZofX, LatentTag::ZofZ];

    pub fn name(self) -> &'static str {
        match self {
            LatentTag::YofX => "E_Y(x)",
            LatentTag::YofY => "E_Y(y)",
            LatentTag::ZofX => "E_Z(x)",
            LatentTag::ZofZ => "E_Z(z)",
        }
    }

    pub fn stream(self) -> usize {
        match self {
            LatentTag::YofX | LatentTag::YofY => 0,
            LatentTag::ZofX | LatentTag::ZofZ => 1,
        }
    }

    fn encodes_blend(self) -> bool {
        matches!(self, LatentTag::YofX | LatentTag::ZofX)
    }

    /// Scatter colour: the y family in warm tones, the z family in cool ones.
    fn colour(self) -> [f64; 3] {
        match self {
            LatentTag::YofX => [1.0, 0.6, 0.0],
            LatentTag::YofY => [0.85, 0.1, 0.1],
            LatentTag::ZofX => [0.0, 0.7, 0.9],
            LatentTag::ZofZ => [0.1, 0.2, 0.85],
        }
    }
}

impl fmt::Display for LatentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LatentTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<LatentTag> {
        LatentTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown latent tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub tag: LatentTag,
    pub scene_id: String,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentDump {
    pub rows: Vec<LatentRow>,
}

impl LatentDump {
    pub fn new(rows: Vec<LatentRow>) -> Result<LatentDump> {
        if let Some(first) = rows.first() {
            let n = first.vector.len();
            if n == 0 {
                return Err(Error::InvalidInput("latent vectors are empty".into()));
            }
            if let Some(r) = rows.iter().find(|r| r.vector.len() != n) {
                return Err(Error::InvalidInput(format!(
                    "latent vector for {} has length {}, expected {n}",
                    r.scene_id,
                    r.vector.len()
                )));
            }
        }
        Ok(LatentDump { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.vector.len())
    }

    pub fn count(&self, tag: LatentTag) -> usize {
        self.rows.iter().filter(|r| r.tag == tag).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["tag".to_string(), "scene_id".into()];
        header.extend((0..self.dim()).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.tag.name().to_string(), r.scene_id.clone()];
            rec.extend(r.vector.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<LatentDump> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let tag: LatentTag = rec.get(0).unwrap_or_default().parse()?;
            let scene_id = rec.get(1).unwrap_or_default().to_string();
            let vector = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display()))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(LatentRow { tag, scene_id, vector });
        }
        LatentDump::new(rows)
    }
}

fn pick(pool: &[DomainSample], n: usize, seed: u64, tag: LatentTag) -> Vec<&DomainSample> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut seed::rng(seed, "latents", tag as u64));
    idx.into_iter().take(n).map(|i| &pool[i]).collect()
}

/// Encodes `n_samples` distinct pool entries per tag. The y-domain
/// encoder is stream 0 and the z-domain encoder stream 1.
pub fn export_latents(model: &Model, pools: &Pools, n_samples: usize, seed: u64, exec: Exec) -> Result<LatentDump> {
    if model.n_layers < 2 {
        return Err(Error::InvalidInput("latent export needs at least two streams".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidConfig("latent export needs at least one sample per tag".into()));
    }
    let empty = Vec::new();
    let pool_for = |tag: LatentTag| -> &Vec<DomainSample> {
        match tag {
            LatentTag::YofX | LatentTag::ZofX => &pools.inputs,
            LatentTag::YofY => pools.layers.first().unwrap_or(&empty),
            LatentTag::ZofZ => pools.layers.get(1).unwrap_or(&empty),
        }
    };
    for tag in LatentTag::ALL {
        let have = pool_for(tag).len();
        if have < n_samples {
            return Err(Error::InvalidInput(format!(
                "{} needs {n_samples} samples, its pool holds {have}",
                tag.name()
            )));
        }
    }
    let jobs: Vec<(LatentTag, &DomainSample)> = LatentTag::ALL
        .into_iter()
        .flat_map(|tag| {
            // both encoders see the same blends
            let key = if tag.encodes_blend() { LatentTag::YofX } else { tag };
            pick(pool_for(tag), n_samples, seed, key).into_iter().map(move |d| (tag, d))
        })
        .collect();
    let rows = exec.map_slice(&jobs, |(tag, d)| -> Result<LatentRow> {
        let (latent, _) = model.encode(Exec::Sequential, tag.stream(), &d.image.to_tensor())?;
        Ok(LatentRow {
            tag: *tag,
            scene_id: d.scene_id.clone(),
            vector: latent.data().to_vec(),
        })
    });
    LatentDump::new(rows.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Input and layer pools built from the test scenes, for exporting
/// held-out latents.
pub fn pools_from_test(pools: &Pools) -> Result<Pools> {
    use crate::data::Domain;
    let n_layers = pools.n_layers();
    let mut out = Pools {
        layers: vec![Vec::new(); n_layers],
        ..Pools::default()
    };
    for s in &pools.test {
        out.inputs.push(DomainSample::new(s.x.clone(), Domain::X, &s.scene_id)?);
        for (k, l) in s.layers.iter().enumerate().take(n_layers) {
            if let Some(l) = l {
                out.layers[k].push(DomainSample::new(l.clone(), Domain::Layer(k), &s.scene_id)?);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Unit-length principal directions, one row per component.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub mean: Vec<f64>,
    pub coords: Vec<[f64; 2]>,
}

fn centered(dump: &LatentDump) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = (dump.len(), dump.dim());
    let mut m = DMatrix::from_fn(n, d, |i, j| dump.rows[i].vector[j]);
    let mean: Vec<f64> = (0..d).map(|j| m.column(j).sum() / n as f64).collect();
    for j in 0..d {
        m.column_mut(j).add_scalar_mut(-mean[j]);
    }
    (m, mean)
}

/// Projects onto the top two principal components of the mean-centred dump.
/// Uses the `n x n` Gram matrix when there are fewer rows than dimensions.
pub fn project_2d(dump: &LatentDump) -> Result<Projection> {
    if dump.len() < 3 {
        return Err(Error::InvalidInput(format!("projection needs at least 3 rows, got {}", dump.len())));
    }
    let (m, mean) = centered(dump);
    let (n, d) = m.shape();
    let mut dirs: Vec<(f64, Vec<f64>)> = if n < d {
        let eig = SymmetricEigen::new(&m * m.transpose());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .into_iter()
            .take(2)
            .map(|i| {
                let dir = m.transpose() * eig.eigenvectors.column(i);
                (eig.eigenvalues[i], dir.iter().copied().collect())
            })
            .collect()
    } else {
        let eig = SymmetricEigen::new(m.transpose() * &m);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .into_iter()
            .take(2)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .collect()
    };
    let top = dirs.first().map_or(0.0, |d| d.0);
    let tol = top.abs().max(1.0) * 1e-10 * (n.max(d) as f64);
    if dirs.len() < 2 || dirs[1].0 <= tol {
        return Err(Error::Degenerate("latent dump has rank below 2".into()));
    }
    for (_, v) in dirs.iter_mut() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        let s = big.signum() / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
    let coords = (0..n)
        .map(|i| {
            let row = m.row(i);
            let p = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [p(&dirs[0].1), p(&dirs[1].1)]
        })
        .collect();
    let (e1, v1) = dirs.remove(1);
    let (e0, v0) = dirs.remove(0);
    Ok(Projection {
        components: [v0, v1],
        eigenvalues: [e0 / (n as f64 - 1.0), e1 / (n as f64 - 1.0)],
        mean,
        coords,
    })
}

impl Projection {
    pub fn write_csv(&self, dump: &LatentDump, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["tag", "scene_id", "pc1", "pc2"])?;
        for (r, c) in dump.rows.iter().zip(&self.coords) {
            w.write_record([r.tag.name(), &r.scene_id, &c[0].to_string(), &c[1].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Square RGB scatter plot, one small dot per row.
    pub fn scatter(&self, dump: &LatentDump, size: usize) -> Result<Image> {
        if size < 16 {
            return Err(Error::InvalidConfig(format!("scatter size {size} is too small")));
        }
        let mut data = vec![1.0; 3 * size * size];
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in &self.coords {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let margin = 4.0;
        let span = (size as f64) - 2.0 * margin - 1.0;
        for (r, c) in dump.rows.iter().zip(&self.coords) {
            let px = margin + span * (c[0] - lo[0]) / (hi[0] - lo[0]).max(1e-12);
            let py = margin + span * (1.0 - (c[1] - lo[1]) / (hi[1] - lo[1]).max(1e-12));
            let (cx, cy) = (px.round() as i64, py.round() as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = ((cx + dx) as usize, (cy + dy) as usize);
                    for (ch, v) in r.tag.colour().into_iter().enumerate() {
                        data[(ch * size + y) * size + x] = v;
                    }
                }
            }
        }
        Image::new(size, size, 3, data, RangeTag::Unit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Mean pairwise distance within `E_Y(x) ∪ E_Y(y)`.
    pub intra_y: f64,
    /// Mean pairwise distance within `E_Z(x) ∪ E_Z(z)`.
    pub intra_z: f64,
    /// Mean distance between the two families.
    pub inter: f64,
    /// `inter / mean(intra_y, intra_z)`.
    pub ratio: f64,
    pub n_y: usize,
    pub n_z: usize,
}

impl ClusterStats {
    pub fn separated(&self) -> bool {
        self.inter > self.intra_y && self.inter > self.intra_z
    }
}

/// Mean absolute difference, the metric the training objectives use.
pub fn l1_mean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn mean_within(v: &[&[f64]]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            s += l1_mean(v[i], v[j]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn cluster_separation(dump: &LatentDump) -> Result<ClusterStats> {
    for tag in LatentTag::ALL {
        if dump.count(tag) == 0 {
            return Err(Error::InvalidInput(format!("latent dump has no {} rows", tag.name())));
        }
    }
    let family = |s: usize| -> Vec<&[f64]> {
        dump.rows
            .iter()
            .filter(|r| r.tag.stream() == s)
            .map(|r| r.vector.as_slice())
            .collect()
    };
    let (ys, zs) = (family(0), family(1));
    let intra_y = mean_within(&ys);
    let intra_z = mean_within(&zs);
    let inter = ys.iter().flat_map(|a| zs.iter().map(move |b| l1_mean(a, b))).sum::<f64>()
        / (ys.len() * zs.len()) as f64;
    let intra = 0.5 * (intra_y + intra_z);
    let ratio = if intra > 0.0 { inter / intra } else { f64::INFINITY };
    Ok(ClusterStats {
        intra_y,
        intra_z,
        inter,
        ratio,
        n_y: ys.len(),
        n_z: zs.len(),
    })
}
