//! `asvit train`: dense pre-training of the teacher when none is given,
//! then threshold fine-tuning toward the configured budget.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use asvit_core::train::{finetune, pretrain, write_metrics_csv, EpochMetrics, FinetuneOutcome, RunConfig};
use asvit_core::vit::{save_checkpoint, Checkpoint, ViTWeights};

use crate::manifest::Manifest;
use crate::run::{ensure_dir, load_config, load_model, load_splits, write_text};

pub const MODEL_FILE: &str = "model.asvt";
pub const TEACHER_FILE: &str = "teacher.asvt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.csv";
pub const TRAJECTORY_FILE: &str = "thresholds.csv";

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Dense checkpoint used as teacher and initial student; pre-trained
    /// from the configuration when absent.
    pub teacher: Option<PathBuf>,
    pub threads: usize,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub outcome: FinetuneOutcome,
    pub teacher: ViTWeights<f32>,
    pub model_path: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn cmd_train(opts: &TrainOptions) -> Result<TrainOutput> {
    let (cfg, bytes) = load_config(&opts.config)?;
    ensure_dir(&opts.out)?;
    let mut manifest = Manifest::new("train", opts.threads)
        .with_config(&bytes)
        .with_seed(cfg.train.seed);
    let teacher = match &opts.teacher {
        Some(path) => {
            manifest = manifest.with_checkpoint(path)?;
            let ckpt = load_model(path)?;
            ensure!(
                ckpt.weights.config == cfg.model,
                "teacher architecture {:?} differs from the configured model {:?}",
                ckpt.weights.config,
                cfg.model
            );
            ckpt.weights
        }
        None => pretrain_teacher(&cfg, &opts.out, opts.quiet)?,
    };
    let out = finetune_run(&cfg, &teacher, &opts.out, opts.quiet)?;
    manifest.write(&opts.out)?;
    Ok(out)
}

fn pretrain_teacher(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<ViTWeights<f32>> {
    let (train, eval) = load_splits(cfg)?;
    let (teacher, metrics) = pretrain(&cfg.model, &cfg.pretrain, &train, &eval, |m| {
        if !quiet {
            eprintln!("pretrain epoch {}: acc {:.2}% loss {:.4}", m.epoch, m.acc, m.train_loss);
        }
    })?;
    save_checkpoint(
        out.join(TEACHER_FILE),
        &Checkpoint {
            weights: teacher.clone(),
            prune: None,
        },
    )?;
    write_metrics(&out.join(PRETRAIN_METRICS_FILE), &metrics, 0)?;
    Ok(teacher)
}

/// Fine-tunes a copy of `teacher` and writes the model, metrics and
/// threshold trajectory into `out`.
pub fn finetune_run(cfg: &RunConfig, teacher: &ViTWeights<f32>, out: &Path, quiet: bool) -> Result<TrainOutput> {
    let (train, eval) = load_splits(cfg)?;
    let outcome = finetune(teacher, teacher, &train, &eval, &cfg.train, &cfg.prune, |m| {
        if !quiet {
            eprintln!(
                "finetune epoch {}: acc {:.2}% flops {:.4} thresholds {:?}",
                m.epoch, m.acc, m.flops_fraction, m.thetas
            );
        }
    })?;
    let model_path = out.join(MODEL_FILE);
    save_checkpoint(
        &model_path,
        &Checkpoint {
            weights: outcome.weights.clone(),
            prune: Some(outcome.prune.clone()),
        },
    )?;
    let metrics_path = out.join(METRICS_FILE);
    write_metrics(&metrics_path, &outcome.metrics, cfg.prune.num_stages())?;
    let mut traj = String::from("step");
    (1..=cfg.prune.num_stages()).for_each(|s| traj.push_str(&format!(",theta_{s}")));
    traj.push('\n');
    for (step, thetas) in outcome.trajectory.iter().enumerate() {
        traj.push_str(&(step + 1).to_string());
        thetas.iter().for_each(|t| traj.push_str(&format!(",{t}")));
        traj.push('\n');
    }
    write_text(&out.join(TRAJECTORY_FILE), &traj)?;
    Ok(TrainOutput {
        outcome,
        teacher: teacher.clone(),
        model_path,
        metrics_path,
    })
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics], stages: usize) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, metrics, stages)?;
    std::fs::write(path, buf)?;
    Ok(())
}
