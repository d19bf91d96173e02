//! Little-endian checkpoint container.
//!
//! ```text
//! "ASVT"            4 bytes magic
//! version           u32
//! config            8 × u32: image_size, patch_size, in_chans, embed_dim,
//!                   num_heads, num_layers, mlp_ratio, num_classes
//! repeated until EOF:
//!   name_len        u16
//!   name            name_len bytes, UTF-8
//!   rank            u8
//!   extents         rank × u32
//!   dtype           u8: 0 = f32, 1 = f64
//!   data            product(extents) × dtype
//! ```
//!
//! Model parameters use their canonical names (see
//! [`ViTParams::names`](super::ViTParams::names)). Trained pruning state, when
//! present, is stored in f64 as the extra tensors `prune.locations`,
//! `prune.thresholds`, `prune.temperature`, `prune.budget_fraction` and
//! `prune.mask_strategy` (0 = attention, 1 = activation).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ViTParams, ViTWeights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparsity::{MaskStrategy, PruneConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ASVT";
pub const VERSION: u32 = 2;

/// Weights plus optional trained pruning configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub weights: ViTWeights<T>,
    pub prune: Option<PruneConfig>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

#[derive(Clone, Copy)]
enum Dtype {
    F32 = 0,
    F64 = 1,
}

fn put_tensor(w: &mut impl Write, name: &str, t: &Tensor<f64>, dtype: Dtype) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint("rank exceeds u8".into()))?;
    w.write_all(&[rank])?;
    for &e in t.shape() {
        put_u32(w, e)?;
    }
    w.write_all(&[dtype as u8])?;
    let mut buf = Vec::with_capacity(t.len() * 8);
    for &v in t.data() {
        match dtype {
            Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, ckpt: &Checkpoint<T>) -> Result<()> {
    let c = &ckpt.weights.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        c.image_size,
        c.patch_size,
        c.in_chans,
        c.embed_dim,
        c.num_heads,
        c.num_layers,
        c.mlp_ratio,
        c.num_classes,
    ] {
        put_u32(w, v)?;
    }
    let mut result = Ok(());
    ckpt.weights.params.map(|name, t| {
        if result.is_ok() {
            result = put_tensor(w, name, &t.cast::<f32>().cast(), Dtype::F32);
        }
    });
    result?;
    if let Some(p) = &ckpt.prune {
        let locs: Vec<f64> = p.locations.iter().map(|&l| l as f64).collect();
        put_tensor(w, "prune.locations", &Tensor::vector(locs), Dtype::F64)?;
        put_tensor(w, "prune.thresholds", &Tensor::vector(p.thresholds.clone()), Dtype::F64)?;
        put_tensor(w, "prune.temperature", &Tensor::scalar(p.temperature), Dtype::F64)?;
        put_tensor(w, "prune.budget_fraction", &Tensor::scalar(p.budget_fraction), Dtype::F64)?;
        let strategy = match p.mask_strategy {
            MaskStrategy::Attention => 0.0,
            MaskStrategy::Activation => 1.0,
        };
        put_tensor(w, "prune.mask_strategy", &Tensor::scalar(strategy), Dtype::F64)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?) as usize)
}

/// Reads one named tensor; `None` at a clean end of file.
fn get_tensor(r: &mut impl Read) -> Result<Option<(String, Tensor<f64>)>> {
    let mut len = [0u8; 2];
    match r.read(&mut len[..1])? {
        0 => return Ok(None),
        _ => r
            .read_exact(&mut len[1..])
            .map_err(|e| Error::Checkpoint(format!("truncated name length: {e}")))?,
    }
    let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut name)
        .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let rank = read_exact::<1>(r)?[0] as usize;
    let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    let width = match read_exact::<1>(r)?[0] {
        0 => 4,
        1 => 8,
        d => return Err(Error::Checkpoint(format!("unknown dtype {d} for {name}"))),
    };
    let mut raw = vec![0u8; count * width];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Checkpoint(format!("truncated data for {name}: {e}")))?;
    let data = raw
        .chunks_exact(width)
        .map(|b| match b.try_into() {
            Ok(b8) => f64::from_le_bytes(b8),
            Err(_) => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        })
        .collect();
    Ok(Some((name.clone(), Tensor::new(shape, data)?)))
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Checkpoint<T>> {
    if &read_exact::<4>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an ASVT checkpoint".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = get_u32(r)?;
    }
    let config = ModelConfig {
        image_size: f[0],
        patch_size: f[1],
        in_chans: f[2],
        embed_dim: f[3],
        num_heads: f[4],
        num_layers: f[5],
        mlp_ratio: f[6],
        num_classes: f[7],
    };
    config.validate()?;
    let mut named = BTreeMap::new();
    while let Some((name, t)) = get_tensor(r)? {
        if named.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let params = ViTParams::shapes(&config).try_map(|name, shape| {
        let t = named
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != &shape[..] {
            return Err(Error::Checkpoint(format!(
                "schema mismatch for {name}: file {:?}, config {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t.cast::<T>())
    })?;
    let prune = read_prune(&mut named)?;
    if let Some(extra) = named.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        weights: ViTWeights { config, params },
        prune,
    })
}

fn read_prune(named: &mut BTreeMap<String, Tensor<f64>>) -> Result<Option<PruneConfig>> {
    let Some(locs) = named.remove("prune.locations") else {
        return Ok(None);
    };
    let mut take = |k: &str| {
        named
            .remove(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {k}")))
    };
    let thresholds = take("prune.thresholds")?;
    let temperature = take("prune.temperature")?;
    let budget = take("prune.budget_fraction")?;
    let strategy = take("prune.mask_strategy")?;
    Ok(Some(PruneConfig {
        locations: locs.data().iter().map(|&v| v as usize).collect(),
        thresholds: thresholds.data().to_vec(),
        temperature: temperature.data()[0],
        budget_fraction: budget.data()[0],
        mask_strategy: if strategy.data()[0] == 0.0 {
            MaskStrategy::Attention
        } else {
            MaskStrategy::Activation
        },
    }))
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}
