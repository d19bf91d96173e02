//! `asvit stats`: kept-token histograms, per-image pruning schedules and
//! score dumps at the checkpoint's thresholds.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use asvit_core::data::Dataset;
use asvit_core::sparsity::PrunePolicy;
use asvit_core::vit::{BatchRule, Checkpoint, Realization};

use crate::kept::KeptDistribution;
use crate::parallel::{argmax, infer_all, ImageResult, InferSettings};
use crate::run::{ensure_dir, write_text};

pub const DISTRIBUTION_FILE: &str = "kept_distribution.csv";
pub const SCHEDULES_FILE: &str = "schedules.csv";
pub const SCORES_FILE: &str = "scores.csv";

const CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct StatsOutput {
    pub distribution: KeptDistribution,
    /// Image indices ordered by first-stage kept count, most tokens first.
    pub ranking: Vec<usize>,
    pub results: Vec<ImageResult>,
}

pub fn cmd_stats(ckpt: &Checkpoint<f32>, data: &Dataset, out: &Path, threads: usize) -> Result<StatsOutput> {
    let pc = ckpt
        .prune
        .as_ref()
        .context("stats need a checkpoint with thresholds")?;
    let policy = PrunePolicy::from_config(pc);
    let results = infer_all(
        &ckpt.weights,
        &data.images,
        InferSettings {
            policy: Some(&policy),
            realization: Realization::Gather,
            rule: BatchRule::PerImage,
            chunk: CHUNK,
            threads,
        },
    )?;
    let stages = pc.num_stages();
    let kept: Vec<Vec<usize>> = results.iter().map(|r| r.trace.kept_counts()).collect();
    let distribution = KeptDistribution::from_counts(&kept, stages, ckpt.weights.config.num_patches())?;

    let mut ranking: Vec<usize> = (0..data.len()).collect();
    ranking.sort_by_key(|&i| (std::cmp::Reverse(kept[i].first().copied().unwrap_or(0)), i));

    ensure_dir(out)?;
    let mut buf = Vec::new();
    distribution.write_csv(&mut buf)?;
    std::fs::write(out.join(DISTRIBUTION_FILE), buf)?;

    let mut sched = String::from("rank,image,label,prediction");
    (1..=stages).for_each(|s| write!(sched, ",kept_{s}").unwrap());
    sched.push('\n');
    for (rank, &i) in ranking.iter().enumerate() {
        write!(sched, "{},{i},{},{}", rank + 1, data.labels[i], argmax(&results[i].logits))?;
        kept[i].iter().for_each(|k| write!(sched, ",{k}").unwrap());
        sched.push('\n');
    }
    write_text(&out.join(SCHEDULES_FILE), &sched)?;

    let mut scores = String::from("image,stage,token_index,score,kept_flag\n");
    for (i, r) in results.iter().enumerate() {
        let mut rows = Vec::new();
        r.trace.report().write_csv(&mut rows, false)?;
        for line in String::from_utf8(rows)?.lines() {
            writeln!(scores, "{i},{line}")?;
        }
    }
    write_text(&out.join(SCORES_FILE), &scores)?;
    Ok(StatsOutput {
        distribution,
        ranking,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::{load_eval, load_model};
    use crate::testutil::{tiny_config, trained};

    #[test]
    fn mass_equals_set_size_and_files_exist() {
        let t = trained();
        let ckpt = load_model(&t.model).unwrap();
        let data = load_eval(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_stats(&ckpt, &data, dir.path(), 1).unwrap();
        for s in 0..3 {
            assert_eq!(out.distribution.mass(s), data.len());
        }
        let sched = std::fs::read_to_string(dir.path().join(SCHEDULES_FILE)).unwrap();
        let firsts: Vec<usize> = sched
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
            .collect();
        assert!(firsts.windows(2).all(|w| w[0] >= w[1]));
        let scores = std::fs::read_to_string(dir.path().join(SCORES_FILE)).unwrap();
        assert!(scores.starts_with("image,stage,token_index,score,kept_flag\n0,1,0,"));
        let parallel = cmd_stats(&ckpt, &data, &dir.path().join("p"), 2).unwrap();
        assert_eq!(parallel.distribution, out.distribution);
    }

    #[test]
    fn keep_all_thresholds_give_single_bins() {
        let t = trained();
        let mut ckpt = load_model(&t.model).unwrap();
        ckpt.prune.as_mut().unwrap().thresholds = vec![-1.0; 3];
        let data = load_eval(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_stats(&ckpt, &data, dir.path(), 1).unwrap();
        for s in 0..3 {
            assert_eq!(out.distribution.occupied_bins(s), 1);
            assert_eq!(out.distribution.histograms[s][16], data.len());
        }
    }

    #[test]
    fn dense_checkpoint_is_rejected() {
        let t = trained();
        let mut ckpt = load_model(&t.model).unwrap();
        ckpt.prune = None;
        let data = load_eval(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(cmd_stats(&ckpt, &data, dir.path(), 1).is_err());
    }
}
