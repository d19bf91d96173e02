//! `asvit ablate`: accuracy and cost of design alternatives.
//!
//! Selector arms reuse the trained adaptive model and only change which
//! tokens survive: random and lowest-score selection keep, per image and
//! stage, exactly as many tokens as the thresholds do, and fixed-ratio
//! top-k uses the single keep ratio whose cost is closest. Training arms
//! fine-tune again with one switch flipped and aim at the same budget.

use std::fmt::Write as _;

use anyhow::{ensure, Result};
use asvit_core::data::Dataset;
use asvit_core::flops::FlopsModel;
use asvit_core::scoring::ScoreKind;
use asvit_core::sparsity::{MaskStrategy, PruneConfig, PrunePolicy, Selector};
use asvit_core::train::{evaluate, evaluate_matched, finetune, EvalReport, MatchedArm, RunConfig};
use asvit_core::vit::{BatchRule, Realization, ViTWeights};
use clap::ValueEnum;

use crate::run::load_splits;

/// Largest relative cost gap at which two arms count as matched.
pub const MATCH_TOLERANCE: f64 = 0.02;

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArmSet {
    /// Adaptive, fixed-ratio top-k, random and lowest-score selection.
    Selectors,
    /// Selectors plus the retrained switches.
    All,
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub seeds: Vec<u64>,
    pub arms: ArmSet,
    /// Extra pruning-location sets, each trained as its own arm.
    pub location_sets: Vec<Vec<usize>>,
    pub quiet: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub acc: f64,
    pub flops_fraction: f64,
    /// Cost relative to the adaptive arm of the same seed, minus one.
    pub flops_gap: f64,
    /// Whether the arm belongs to the matched-cost group.
    pub selector_arm: bool,
    pub kept_mean: Vec<f64>,
}

impl AblationRow {
    fn new(arm: &str, seed: u64, r: &EvalReport, reference: f64, selector_arm: bool) -> Self {
        Self {
            arm: arm.to_string(),
            seed,
            acc: r.acc,
            flops_fraction: r.flops_fraction,
            flops_gap: r.flops_fraction / reference - 1.0,
            selector_arm,
            kept_mean: r.kept_mean.clone(),
        }
    }

    pub fn matched(&self) -> bool {
        self.flops_gap.abs() <= MATCH_TOLERANCE
    }
}

pub fn write_ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("arm,seed,acc,flops_fraction,flops_gap,matched,kept_mean\n");
    for r in rows {
        let kept: Vec<String> = r.kept_mean.iter().map(f64::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.arm,
            r.seed,
            r.acc,
            r.flops_fraction,
            r.flops_gap,
            u8::from(r.matched()),
            kept.join(";")
        )
        .unwrap();
    }
    out
}

/// The single keep ratio whose fixed top-k schedule costs closest to
/// `target`; ties go to the larger ratio.
pub fn matched_keep_ratio(flops: &FlopsModel, num_patches: usize, target: f64) -> Result<f64> {
    let mut best = (f64::INFINITY, 1.0);
    for i in (1..=1000).rev() {
        let rho = i as f64 / 1000.0;
        let mut n = num_patches;
        let tokens: Vec<f64> = (0..flops.locations.len())
            .map(|_| {
                n = ((rho * n as f64).ceil() as usize).clamp(1, n);
                n as f64 + 1.0
            })
            .collect();
        let gap = (flops.fraction_for_counts(&tokens)? - target).abs();
        if gap < best.0 {
            best = (gap, rho);
        }
    }
    Ok(best.1)
}

/// Adaptive, fixed-ratio top-k, random and lowest-score arms on one trained
/// model, in that order.
pub fn selector_arms(w: &ViTWeights<f32>, pc: &PruneConfig, score: ScoreKind, eval: &Dataset, seed: u64) -> Result<Vec<AblationRow>> {
    let policy = PrunePolicy::from_config(pc).with_score(score);
    let adaptive = evaluate_matched(w, &policy, eval, MatchedArm::Adaptive, Realization::Gather)?;
    let reference = adaptive.flops_fraction;
    let flops = FlopsModel::new(&w.config, &pc.locations)?;
    let rho = matched_keep_ratio(&flops, w.config.num_patches(), reference)?;
    let topk = evaluate(
        w,
        Some(&policy.clone().with_selector(Selector::TopRatio(rho))),
        eval,
        Realization::Gather,
        BatchRule::PerImage,
        CHUNK,
    )?;
    let random = evaluate_matched(w, &policy, eval, MatchedArm::Random { seed }, Realization::Gather)?;
    let lowest = evaluate_matched(w, &policy, eval, MatchedArm::Lowest, Realization::Gather)?;
    Ok(vec![
        AblationRow::new("adaptive", seed, &adaptive, reference, true),
        AblationRow::new(&format!("fixed_ratio_topk_{rho}"), seed, &topk, reference, true),
        AblationRow::new("random", seed, &random, reference, true),
        AblationRow::new("min_k", seed, &lowest, reference, true),
    ])
}

pub fn cmd_ablate(cfg: &RunConfig, teacher: &ViTWeights<f32>, opts: &AblateOptions) -> Result<Vec<AblationRow>> {
    ensure!(!opts.seeds.is_empty(), "ablation needs at least one seed");
    let (train, eval) = load_splits(cfg)?;
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let mut base = cfg.clone();
        base.train.seed = seed;
        let run = |c: &RunConfig| -> Result<(ViTWeights<f32>, PruneConfig)> {
            let out = finetune(teacher, teacher, &train, &eval, &c.train, &c.prune, |m| {
                if !opts.quiet {
                    eprintln!("seed {seed} epoch {}: flops {:.4}", m.epoch, m.flops_fraction);
                }
            })?;
            Ok((out.weights, out.prune))
        };
        let (w, pc) = run(&base)?;
        let group = selector_arms(&w, &pc, base.train.score, &eval, seed)?;
        let reference = group[0].flops_fraction;
        rows.extend(group);
        if opts.arms == ArmSet::Selectors {
            continue;
        }
        let mut variants: Vec<(String, RunConfig)> = Vec::new();
        let flipped = match base.train.score {
            ScoreKind::HeadWeighted => ScoreKind::Vanilla,
            ScoreKind::Vanilla => ScoreKind::HeadWeighted,
        };
        let mut v = base.clone();
        v.train.score = flipped;
        variants.push((format!("score_{}", score_name(flipped)), v));
        let mut v = base.clone();
        v.prune.mask_strategy = match base.prune.mask_strategy {
            MaskStrategy::Attention => MaskStrategy::Activation,
            MaskStrategy::Activation => MaskStrategy::Attention,
        };
        variants.push((format!("{}_mask", strategy_name(v.prune.mask_strategy)), v));
        let mut v = base.clone();
        v.train.lambda_distill = if base.train.lambda_distill > 0.0 { 0.0 } else { 0.5 };
        variants.push((if v.train.lambda_distill > 0.0 { "distill_on" } else { "distill_off" }.into(), v));
        for set in &opts.location_sets {
            ensure!(
                set.len() == base.prune.thresholds.len(),
                "location set {set:?} needs {} entries to reuse the initial thresholds",
                base.prune.thresholds.len()
            );
            let mut v = base.clone();
            v.prune.locations = set.clone();
            v.validate()?;
            let name: Vec<String> = set.iter().map(usize::to_string).collect();
            variants.push((format!("locations_{}", name.join("-")), v));
        }
        for (name, c) in variants {
            let (w, pc) = run(&c)?;
            let policy = PrunePolicy::from_config(&pc).with_score(c.train.score);
            let r = evaluate(&w, Some(&policy), &eval, Realization::Gather, BatchRule::PerImage, CHUNK)?;
            rows.push(AblationRow::new(&name, seed, &r, reference, false));
        }
    }
    Ok(rows)
}

/// Selector arms whose cost strays from the adaptive arm.
pub fn unmatched(rows: &[AblationRow]) -> Vec<&AblationRow> {
    rows.iter().filter(|r| r.selector_arm && !r.matched()).collect()
}

fn score_name(k: ScoreKind) -> &'static str {
    match k {
        ScoreKind::HeadWeighted => "head_weighted",
        ScoreKind::Vanilla => "vanilla",
    }
}

fn strategy_name(s: MaskStrategy) -> &'static str {
    match s {
        MaskStrategy::Attention => "attention",
        MaskStrategy::Activation => "activation",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::load_model;
    use crate::testutil::{tiny_config, trained};
    use asvit_core::vit::ModelConfig;

    #[test]
    fn keep_ratio_hits_reachable_targets() {
        let flops = FlopsModel::new(&ModelConfig::tiny_as(), &[4, 7, 10]).unwrap();
        let rho = matched_keep_ratio(&flops, 64, 0.65).unwrap();
        let mut n = 64usize;
        let tokens: Vec<f64> = (0..3)
            .map(|_| {
                n = (rho * n as f64).ceil() as usize;
                n as f64 + 1.0
            })
            .collect();
        assert!((flops.fraction_for_counts(&tokens).unwrap() - 0.65).abs() < 0.01);
        assert_eq!(matched_keep_ratio(&flops, 64, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn selector_group_is_matched() {
        let t = trained();
        let ckpt = load_model(&t.model).unwrap();
        let eval = crate::run::load_eval(&tiny_config()).unwrap();
        let rows = selector_arms(&ckpt.weights, ckpt.prune.as_ref().unwrap(), ScoreKind::HeadWeighted, &eval, 0).unwrap();
        assert_eq!(rows.len(), 4);
        for r in [&rows[0], &rows[2], &rows[3]] {
            assert_eq!(r.flops_gap, 0.0);
        }
    }

    #[test]
    fn all_arms_are_deterministic() {
        let t = trained();
        let teacher = load_model(&t.dir.path().join("train").join(crate::train::TEACHER_FILE)).unwrap();
        let opts = AblateOptions {
            seeds: vec![1],
            arms: ArmSet::All,
            location_sets: vec![vec![1, 2, 3]],
            quiet: true,
        };
        let a = cmd_ablate(&tiny_config(), &teacher.weights, &opts).unwrap();
        let b = cmd_ablate(&tiny_config(), &teacher.weights, &opts).unwrap();
        assert_eq!(write_ablation_csv(&a), write_ablation_csv(&b));
        let arms: Vec<&str> = a.iter().map(|r| r.arm.as_str()).collect();
        assert_eq!(arms[4..], ["score_vanilla", "activation_mask", "distill_off", "locations_1-2-3"]);
    }
}
