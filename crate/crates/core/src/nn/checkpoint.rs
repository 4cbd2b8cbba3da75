//! Versioned tensor container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! with metadata and a tensor index, then every tensor as little-endian
//! `f64` in index order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_params, parse_name, ModelParams, NetworkProfile, Part};
use crate::error::{Error, Result};
use crate::tensor::{numel, Shape, Tensor};

const MAGIC: &[u8; 8] = b"LSEPCKPT";
const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim.";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Shape,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn save_tensor_file<'a>(
    path: &Path,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.to_string(),
                shape: t.shape(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_tensor_file(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| corrupt("truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long).map_err(|_| corrupt("truncated header"))?;
    let len = u64::from_le_bytes(long) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::json(path, e))?;
    let mut out = BTreeMap::new();
    let mut buf = [0u8; 8];
    for e in header.tensors {
        let n = numel(e.shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| corrupt(&format!("tensor {} is truncated", e.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.insert(e.name, Tensor::new(e.shape, data)?);
    }
    if r.read(&mut buf).map_err(|e| Error::io(path, e))? != 0 {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok((header.meta, out))
}

/// Parameters, optimizer moments and trainer metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub profile: NetworkProfile,
    pub n_layers: usize,
    pub step: u64,
    /// Free-form trainer state (config, optimizer counters).
    pub meta: serde_json::Value,
    pub params: ModelParams,
    /// Optimizer tensors keyed like `m.<param name>`.
    pub optim: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    profile: NetworkProfile,
    n_layers: usize,
    step: u64,
    trainer: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            profile: self.profile.clone(),
            n_layers: self.n_layers,
            step: self.step,
            trainer: self.meta.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::json(path, e))?;
        let optim: Vec<(String, &Tensor)> = self
            .optim
            .iter()
            .map(|(n, t)| (format!("{OPTIM_PREFIX}{n}"), t))
            .collect();
        save_tensor_file(
            path,
            meta,
            self.params
                .iter()
                .chain(optim.iter().map(|(n, t)| (n.as_str(), *t))),
        )
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (meta, tensors) = load_tensor_file(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::json(path, e))?;
        let mut params = ModelParams::new();
        let mut optim = ModelParams::new();
        for (name, t) in tensors {
            match name.strip_prefix(OPTIM_PREFIX) {
                Some(rest) => optim.insert(rest, t),
                None => params.insert(name, t),
            }
        }
        meta.profile.validate()?;
        check_params(&params, &meta.profile, meta.n_layers)?;
        Ok(Checkpoint {
            profile: meta.profile,
            n_layers: meta.n_layers,
            step: meta.step,
            meta: meta.trainer,
            params,
            optim,
        })
    }

    /// Loads and insists on the given profile and layer count.
    pub fn load_expecting(path: &Path, profile: &NetworkProfile, n_layers: usize) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        if &ck.profile != profile || ck.n_layers != n_layers {
            return Err(Error::Checkpoint(format!(
                "{} was written for a {:?} profile with {} layers",
                path.display(),
                ck.profile.kind,
                ck.n_layers
            )));
        }
        Ok(ck)
    }
}

/// Copies externally trained VGG weights named like `conv3_2.weight` into
/// every stream's encoder. Returns how many tensors were copied.
pub fn load_vgg_weights(params: &mut ModelParams, path: &Path) -> Result<usize> {
    let (_, tensors) = load_tensor_file(path)?;
    let targets: Vec<String> = params
        .names()
        .filter(|n| parse_name(n).map(|(_, p)| p) == Some(Part::Encoder))
        .map(str::to_owned)
        .collect();
    let mut copied = 0;
    for target in targets {
        let local = target.splitn(3, '.').nth(2).unwrap_or_default();
        let Some(src) = tensors.get(local) else {
            continue;
        };
        let dst = params.get_mut(&target).expect("name came from params");
        if dst.shape() != src.shape() {
            return Err(Error::Checkpoint(format!(
                "external {local} has shape {:?}, encoder expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
        copied += 1;
    }
    if copied == 0 {
        return Err(Error::Checkpoint(format!(
            "{} holds no encoder weights",
            path.display()
        )));
    }
    Ok(copied)
}
