//! Dense pre-training and budget-aware threshold fine-tuning.
//!
//! A step runs one tape per image against weights shared through `Arc`,
//! takes the batch-mean cost fraction, and seeds every tape's backward pass
//! with `CE/B`, `λ₂·KL/B` and `λ₁·sign(mean − target)/B` on its own cost
//! fraction. Gradients are summed in image order, so a run is bitwise
//! reproducible on one thread.

mod config;
mod eval;
mod loss;
mod optim;

pub use config::{DataConfig, DataSource, PretrainConfig, RunConfig, TrainConfig};
pub use eval::{evaluate, evaluate_matched, EvalReport, MatchedArm};
pub use loss::{budget_grad, budget_loss, cross_entropy, distill_loss, total_loss};
pub use optim::{AdamW, CosineSchedule};

use std::io::Write;
use std::sync::Arc;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::FlopsModel;
use crate::scalar::lit;
use crate::sparsity::{PruneConfig, PrunePolicy};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{
    forward_batch, tape_forward, tape_params, BatchRule, ModelConfig, Realization, StageMasking, ViTParams, ViTWeights,
};

const EVAL_CHUNK: usize = 64;

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 0 is the state before training.
    pub epoch: usize,
    /// Held-out accuracy in percent.
    pub acc: f64,
    /// Held-out mean cost fraction.
    pub flops_fraction: f64,
    pub thetas: Vec<f64>,
    pub kept_mean: Vec<f64>,
    /// Mean training objective over the epoch (0 for epoch 0).
    pub train_loss: f64,
}

/// Writes `epoch,acc,flops_fraction,theta_1..,kept_mean_1..`.
pub fn write_metrics_csv(w: &mut impl Write, metrics: &[EpochMetrics], stages: usize) -> Result<()> {
    let mut header = vec!["epoch".to_string(), "acc".into(), "flops_fraction".into()];
    header.extend((1..=stages).map(|s| format!("theta_{s}")));
    header.extend((1..=stages).map(|s| format!("kept_mean_{s}")));
    writeln!(w, "{}", header.join(","))?;
    for m in metrics {
        let mut row = vec![m.epoch.to_string(), m.acc.to_string(), m.flops_fraction.to_string()];
        row.extend(m.thetas.iter().map(f64::to_string));
        row.extend(m.kept_mean.iter().map(f64::to_string));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Result of [`finetune`].
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub weights: ViTWeights<f32>,
    /// Input configuration with the trained thresholds.
    pub prune: PruneConfig,
    pub metrics: Vec<EpochMetrics>,
    /// Thresholds after every optimizer step.
    pub trajectory: Vec<Vec<f64>>,
}

struct Trainer {
    params: ViTParams<Arc<Tensor<f32>>>,
    opt: AdamW<f32>,
}

impl Trainer {
    fn new(w: &ViTWeights<f32>, weight_decay: f64) -> Self {
        let shapes: Vec<&[usize]> = w.params.refs().iter().map(|t| t.shape()).collect();
        Self {
            params: w.params.map(|_, t| Arc::new(t.clone())),
            opt: AdamW::new(&shapes, weight_decay),
        }
    }

    fn apply(&mut self, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        let mut refs: Vec<&mut Tensor<f32>> = self.params.refs_mut().into_iter().map(Arc::make_mut).collect();
        self.opt.step(&mut refs, grads, lr)
    }

    fn weights(&self, config: &ModelConfig) -> ViTWeights<f32> {
        ViTWeights {
            config: config.clone(),
            params: self.params.map(|_, t| (**t).clone()),
        }
    }
}

fn accumulate(acc: &mut [Option<Tensor<f32>>], grads: &mut crate::tape::Gradients<f32>, vars: &[Var]) -> Result<()> {
    for (slot, &v) in acc.iter_mut().zip(vars) {
        if let Some(g) = grads.take(v) {
            match slot {
                Some(a) => a.add_assign(&g)?,
                None => *slot = Some(g),
            }
        }
    }
    Ok(())
}

fn check_finite(what: &str, v: f64, epoch: usize, step: usize) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Diverged(format!("{what} = {v} at epoch {epoch}, step {step}")));
    }
    Ok(())
}

/// Dense supervised training from a seeded initialization.
pub fn pretrain(
    cfg: &ModelConfig,
    pc: &PretrainConfig,
    train: &Dataset,
    eval: &Dataset,
    mut log: impl FnMut(&EpochMetrics),
) -> Result<(ViTWeights<f32>, Vec<EpochMetrics>)> {
    let init = ViTWeights::<f32>::init(cfg, pc.seed)?;
    let mut trainer = Trainer::new(&init, pc.weight_decay);
    let steps_per_epoch = train.len().div_ceil(pc.batch_size);
    let sched = CosineSchedule {
        base: pc.lr,
        min: pc.min_lr,
        total: steps_per_epoch * pc.epochs,
    };
    let mut metrics = Vec::new();
    let mut step = 0;
    for epoch in 1..=pc.epochs {
        let order = train.epoch_order(pc.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(pc.batch_size) {
            let inv_b = 1.0 / batch.len() as f32;
            let mut acc: Vec<Option<Tensor<f32>>> = vec![None; trainer.params.refs().len()];
            for &i in batch {
                let mut tape = Tape::new();
                let p = tape_params(&mut tape, &trainer.params, true);
                let out = tape_forward(
                    &mut tape,
                    &p,
                    cfg,
                    &train.images[i],
                    &StageMasking::Dense,
                    Default::default(),
                )?;
                let ce = tape.cross_entropy(out.logits, train.labels[i])?;
                let v = tape.value(ce).data()[0] as f64;
                check_finite("cross-entropy", v, epoch, step)?;
                loss_sum += v;
                let mut g = tape.backward_seeded(&[(ce, inv_b)])?;
                let vars: Vec<Var> = p.refs().into_iter().copied().collect();
                accumulate(&mut acc, &mut g, &vars)?;
            }
            trainer.apply(&acc, sched.at(step))?;
            step += 1;
        }
        let w = trainer.weights(cfg);
        let report = evaluate(&w, None, eval, Realization::Gather, BatchRule::PerImage, EVAL_CHUNK)?;
        let m = EpochMetrics {
            epoch,
            acc: report.acc,
            flops_fraction: report.flops_fraction,
            thetas: vec![],
            kept_mean: vec![],
            train_loss: loss_sum / train.len() as f64,
        };
        log(&m);
        metrics.push(m);
    }
    Ok((trainer.weights(cfg), metrics))
}

/// Dense logits of `model` for every image.
pub fn teacher_logits(model: &ViTWeights<f32>, data: &Dataset) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    for imgs in data.images.chunks(EVAL_CHUNK) {
        let inf = forward_batch(imgs, model, None, Realization::Gather, BatchRule::PerImage)?;
        let c = inf.logits.last_dim();
        for r in 0..imgs.len() {
            out.push(Tensor::vector(inf.logits.row(r).to_vec()).reshape([c])?);
        }
    }
    Ok(out)
}

/// Held-out evaluation of a threshold configuration with the training-time
/// masking.
pub fn evaluate_thresholds(w: &ViTWeights<f32>, pc: &PruneConfig, tc: &TrainConfig, data: &Dataset) -> Result<EvalReport> {
    let policy = PrunePolicy::from_config(pc).with_score(tc.score);
    evaluate(
        w,
        Some(&policy),
        data,
        Realization::Mask(pc.mask_strategy),
        BatchRule::PerImage,
        EVAL_CHUNK,
    )
}

/// Trains the thresholds (and, unless frozen, the backbone) of `student`
/// toward the budget fraction in `pc`, distilling from `teacher`.
pub fn finetune(
    student: &ViTWeights<f32>,
    teacher: &ViTWeights<f32>,
    train: &Dataset,
    eval: &Dataset,
    tc: &TrainConfig,
    pc: &PruneConfig,
    mut log: impl FnMut(&EpochMetrics),
) -> Result<FinetuneOutcome> {
    let cfg = &student.config;
    tc.validate()?;
    pc.validate(cfg.num_layers)?;
    if teacher.config != *cfg {
        return Err(Error::Config("teacher and student architectures differ".into()));
    }
    let flops = FlopsModel::new(cfg, &pc.locations)?;
    let targets = if tc.lambda_distill > 0.0 {
        teacher_logits(teacher, train)?
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::new(student, tc.weight_decay);
    let mut thetas: Vec<Tensor<f32>> = pc.thresholds.iter().map(|&t| Tensor::vector(vec![t as f32])).collect();
    let shapes: Vec<&[usize]> = thetas.iter().map(|t| t.shape()).collect();
    let mut theta_opt = AdamW::<f32>::new(&shapes, 0.0);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.epochs;
    let lr = CosineSchedule {
        base: tc.lr,
        min: tc.min_lr,
        total,
    };
    let theta_lr = CosineSchedule {
        base: tc.theta_lr,
        min: tc.theta_min_lr,
        total,
    };
    let current = |thetas: &[Tensor<f32>]| -> Vec<f64> { thetas.iter().map(|t| t.data()[0] as f64).collect() };
    let with_thresholds = |th: Vec<f64>| PruneConfig {
        thresholds: th,
        ..pc.clone()
    };

    let mut metrics = Vec::new();
    let mut trajectory = Vec::new();
    let initial = evaluate_thresholds(student, pc, tc, eval)?;
    let m0 = EpochMetrics {
        epoch: 0,
        acc: initial.acc,
        flops_fraction: initial.flops_fraction,
        thetas: pc.thresholds.clone(),
        kept_mean: initial.kept_mean,
        train_loss: 0.0,
    };
    log(&m0);
    metrics.push(m0);

    let mut step = 0;
    for epoch in 1..=tc.epochs {
        let order = train.epoch_order(tc.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let b = batch.len() as f64;
            let mut tapes = Vec::with_capacity(batch.len());
            let mut fractions = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut tape = Tape::<f32>::new();
                let p = tape_params(&mut tape, &trainer.params, !tc.freeze_backbone);
                let theta_vars: Vec<Var> = thetas.iter().map(|t| tape.param(t.clone())).collect();
                let masking = StageMasking::Learned {
                    locations: pc.locations.clone(),
                    thetas: theta_vars.clone(),
                    temperature: lit(pc.temperature),
                    mode: tc.mask_mode,
                    detach_score: tc.detach_score,
                    score: tc.score,
                };
                let out = tape_forward(&mut tape, &p, cfg, &train.images[i], &masking, pc.mask_strategy)?;
                let ce = tape.cross_entropy(out.logits, train.labels[i])?;
                let kl = match targets.get(i) {
                    Some(t) => Some(tape.kl_div(out.logits, t, tc.kl_direction)?),
                    None => None,
                };
                let counts: Vec<Var> = out.stages.iter().map(|s| s.count).collect();
                let frac = flops.tape_fraction(&mut tape, &counts)?;
                let ce_v = tape.value(ce).data()[0] as f64;
                let kl_v = kl.map_or(0.0, |k| tape.value(k).data()[0] as f64);
                fractions.push(tape.value(frac).data()[0] as f64);
                loss_sum += ce_v + tc.lambda_distill * kl_v;
                check_finite("training loss", ce_v + kl_v, epoch, step)?;
                tapes.push((tape, p, theta_vars, ce, kl, frac));
            }
            let mean = loss::mean(&fractions);
            if !(mean > 0.0 && mean <= 1.0 + 1e-6) {
                return Err(Error::Diverged(format!(
                    "batch FLOPs fraction {mean} left (0, 1] at epoch {epoch}, step {step}; thresholds {:?}",
                    current(&thetas)
                )));
            }
            let target = pc.budget_fraction;
            loss_sum += tc.lambda_flops * budget_loss(&fractions, target) * b;
            let g_frac = (tc.lambda_flops * budget_grad(mean, target) / b) as f32;
            let inv_b = (1.0 / b) as f32;
            let distill_w = (tc.lambda_distill / b) as f32;
            let mut acc: Vec<Option<Tensor<f32>>> = vec![None; trainer.params.refs().len()];
            let mut theta_acc: Vec<Option<Tensor<f32>>> = vec![None; thetas.len()];
            for (tape, p, theta_vars, ce, kl, frac) in tapes {
                let mut seeds = vec![(ce, inv_b), (frac, g_frac)];
                if let Some(k) = kl {
                    seeds.push((k, distill_w));
                }
                let mut g = tape.backward_seeded(&seeds)?;
                if !tc.freeze_backbone {
                    let vars: Vec<Var> = p.refs().into_iter().copied().collect();
                    accumulate(&mut acc, &mut g, &vars)?;
                }
                accumulate(&mut theta_acc, &mut g, &theta_vars)?;
            }
            if !tc.freeze_backbone {
                trainer.apply(&acc, lr.at(step))?;
            }
            let mut refs: Vec<&mut Tensor<f32>> = thetas.iter_mut().collect();
            theta_opt.step(&mut refs, &theta_acc, theta_lr.at(step))?;
            let now = current(&thetas);
            if now.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged(format!("non-finite thresholds {now:?} at step {step}")));
            }
            trajectory.push(now);
            step += 1;
        }
        let w = trainer.weights(cfg);
        let report = evaluate_thresholds(&w, &with_thresholds(current(&thetas)), tc, eval)?;
        if !(report.flops_fraction > 0.0 && report.flops_fraction <= 1.0 + 1e-9) {
            return Err(Error::Diverged(format!(
                "eval FLOPs fraction {} left (0, 1] after epoch {epoch}",
                report.flops_fraction
            )));
        }
        let m = EpochMetrics {
            epoch,
            acc: report.acc,
            flops_fraction: report.flops_fraction,
            thetas: current(&thetas),
            kept_mean: report.kept_mean,
            train_loss: loss_sum / train.len() as f64,
        };
        log(&m);
        metrics.push(m);
    }
    Ok(FinetuneOutcome {
        weights: trainer.weights(cfg),
        prune: with_thresholds(current(&thetas)),
        metrics,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            in_chans: 3,
            embed_dim: 16,
            num_heads: 2,
            num_layers: 4,
            mlp_ratio: 2,
            num_classes: 10,
        }
    }

    fn prune() -> PruneConfig {
        PruneConfig {
            locations: vec![1, 2, 3],
            thresholds: vec![0.01, 0.02, 0.03],
            ..PruneConfig::default()
        }
    }

    #[test]
    fn metrics_csv_header_and_rows() {
        let m = EpochMetrics {
            epoch: 1,
            acc: 50.0,
            flops_fraction: 0.7,
            thetas: vec![0.1, 0.2],
            kept_mean: vec![10.0, 5.5],
            train_loss: 1.0,
        };
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &[m], 2).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,acc,flops_fraction,theta_1,theta_2,kept_mean_1,kept_mean_2\n1,50,0.7,0.1,0.2,10,5.5\n"
        );
    }

    #[test]
    fn pretrain_reduces_loss() {
        let data = Dataset::synthetic(40, 16, 1).unwrap();
        let pc = PretrainConfig {
            epochs: 3,
            lr: 3e-3,
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let (_, m) = pretrain(&tiny(), &pc, &data, &data, |_| {}).unwrap();
        assert!(m[2].train_loss < m[0].train_loss, "{m:?}");
    }

    #[test]
    fn no_budget_pressure_leaves_saturated_thresholds() {
        let data = Dataset::synthetic(8, 16, 2).unwrap();
        let w = ViTWeights::<f32>::init(&tiny(), 0).unwrap();
        let tc = TrainConfig {
            lambda_flops: 0.0,
            detach_score: true,
            freeze_backbone: true,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let pc = PruneConfig {
            thresholds: vec![-1.0, -1.0, -1.0],
            ..prune()
        };
        let out = finetune(&w, &w, &data, &data, &tc, &pc, |_| {}).unwrap();
        assert_eq!(out.trajectory.len(), 2);
        for th in &out.trajectory {
            assert_eq!(th, &pc.thresholds);
        }
        assert_eq!(out.metrics[1].flops_fraction, 1.0);
    }

    #[test]
    fn budget_pressure_raises_thresholds() {
        let data = Dataset::synthetic(8, 16, 3).unwrap();
        let w = ViTWeights::<f32>::init(&tiny(), 1).unwrap();
        let tc = TrainConfig {
            lambda_flops: 2.0,
            lambda_distill: 0.0,
            freeze_backbone: true,
            detach_score: true,
            epochs: 2,
            batch_size: 4,
            theta_lr: 1e-3,
            theta_min_lr: 1e-3,
            ..TrainConfig::default()
        };
        let pc = PruneConfig {
            temperature: 100.0,
            budget_fraction: 0.3,
            ..prune()
        };
        let out = finetune(&w, &w, &data, &data, &tc, &pc, |_| {}).unwrap();
        for (after, before) in out.prune.thresholds.iter().zip(&pc.thresholds) {
            assert!(after > before, "{:?}", out.prune.thresholds);
        }
    }

    #[test]
    fn finetune_is_deterministic() {
        let data = Dataset::synthetic(8, 16, 4).unwrap();
        let w = ViTWeights::<f32>::init(&tiny(), 2).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let out = finetune(&w, &w, &data, &data, &tc, &prune(), |_| {}).unwrap();
            let mut csv = Vec::new();
            write_metrics_csv(&mut csv, &out.metrics, 3).unwrap();
            csv
        };
        assert_eq!(run(), run());
    }
}
