//! Data splits, model loading and shared output helpers.

use std::path::Path;

use anyhow::{bail, Context, Result};
use asvit_core::data::Dataset;
use asvit_core::train::{DataConfig, DataSource, RunConfig};
use asvit_core::vit::{load_checkpoint, Checkpoint};

/// Offset between the train and evaluation seeds of synthetic data.
const EVAL_SEED_OFFSET: u64 = 0x9e37_79b9;

/// Train and evaluation splits described by `cfg.data`.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dc = &cfg.data;
    let size = cfg.model.image_size;
    match dc.source {
        DataSource::Synthetic => Ok((
            Dataset::synthetic(dc.train_size, size, dc.seed)?,
            Dataset::synthetic(dc.eval_size, size, eval_seed(dc))?,
        )),
        DataSource::Cifar10 => {
            if size != 32 {
                bail!("CIFAR-10 images are 32x32 but the model expects {size}");
            }
            let dir = dc
                .cifar_dir
                .as_deref()
                .context("data.cifar_dir must be set for the cifar10 source")?;
            let dir = Path::new(dir);
            let train_files: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            Ok((
                Dataset::load_cifar10(&train_files, dc.train_size)?,
                Dataset::load_cifar10(&[dir.join("test_batch.bin")], dc.eval_size)?,
            ))
        }
    }
}

/// Only the evaluation split.
pub fn load_eval(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => Ok(Dataset::synthetic(
            cfg.data.eval_size,
            cfg.model.image_size,
            eval_seed(&cfg.data),
        )?),
        DataSource::Cifar10 => Ok(load_splits(cfg)?.1),
    }
}

fn eval_seed(dc: &DataConfig) -> u64 {
    dc.seed.wrapping_add(EVAL_SEED_OFFSET)
}

pub fn load_model(path: &Path) -> Result<Checkpoint<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).context("configuration is not UTF-8")?;
    let cfg = RunConfig::from_toml(text).with_context(|| format!("invalid configuration {}", path.display()))?;
    Ok((cfg, bytes))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
