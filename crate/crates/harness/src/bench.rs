//! `asvit bench`: wall-clock throughput at a fixed batch size and batch-1
//! latency. Timing covers scoring and token gathering but not data
//! loading; pruned mode physically discards tokens.

use std::io::Write;
use std::time::Instant;

use anyhow::{ensure, Result};
use asvit_core::data::Dataset;
use asvit_core::flops::FlopsModel;
use asvit_core::sparsity::PrunePolicy;
use asvit_core::vit::{forward_batch, BatchRule, Checkpoint, Realization};
use clap::ValueEnum;

use crate::parallel::argmax;
use crate::run::mean_std;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Dense,
    Pruned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BatchRuleArg {
    /// Every image applies the thresholds on its own.
    PerImage,
    /// Every image keeps the batch-mean threshold count.
    BatchK,
}

impl From<BatchRuleArg> for BatchRule {
    fn from(a: BatchRuleArg) -> Self {
        match a {
            BatchRuleArg::PerImage => BatchRule::PerImage,
            BatchRuleArg::BatchK => BatchRule::BatchK,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub mode: BenchMode,
    pub batch_size: usize,
    /// Untimed batch-1 runs before latency timing; at least 10.
    pub warmup: usize,
    /// Timed batch-1 runs; at least 100.
    pub runs: usize,
    /// Timed passes over the whole set; the median throughput is reported.
    pub passes: usize,
    pub rule: BatchRule,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            mode: BenchMode::Pruned,
            batch_size: 64,
            warmup: 10,
            runs: 100,
            passes: 3,
            rule: BatchRule::PerImage,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub model_id: String,
    pub mode: BenchMode,
    pub batch_size: usize,
    /// Target of the checkpoint's threshold training, if it has one.
    pub budget_fraction: Option<f64>,
    /// Measured mean cost fraction; exactly 1 in dense mode.
    pub flops_fraction: f64,
    /// Images per second.
    pub throughput: f64,
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
    /// Percent correct over the benchmark set.
    pub accuracy: f64,
    pub images: usize,
    pub warmup: usize,
    pub runs: usize,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str = "model_id,mode,batch_size,budget_fraction,flops_fraction,images_per_sec,latency_mean_ms,latency_std_ms,accuracy,images,warmup,runs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.4},{:.4},{},{},{},{}",
            self.model_id,
            match self.mode {
                BenchMode::Dense => "dense",
                BenchMode::Pruned => "pruned",
            },
            self.batch_size,
            self.budget_fraction.map(|f| f.to_string()).unwrap_or_default(),
            self.flops_fraction,
            self.throughput,
            self.latency_mean_ms,
            self.latency_std_ms,
            self.accuracy,
            self.images,
            self.warmup,
            self.runs
        )
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }
}

pub fn cmd_bench(ckpt: &Checkpoint<f32>, model_id: &str, data: &Dataset, opts: &BenchOptions) -> Result<BenchResult> {
    ensure!(!data.is_empty(), "benchmark set is empty");
    ensure!(opts.batch_size > 0, "batch size must be positive");
    ensure!(opts.warmup >= 10, "latency needs at least 10 warmup runs");
    ensure!(opts.runs >= 100, "latency needs at least 100 timed runs");
    let w = &ckpt.weights;
    let policy = match opts.mode {
        BenchMode::Dense => None,
        BenchMode::Pruned => {
            let pc = ckpt
                .prune
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("pruned mode needs a checkpoint with thresholds"))?;
            Some(PrunePolicy::from_config(pc))
        }
    };
    let policy = policy.as_ref();
    let infer = |imgs: &[asvit_core::Tensor<f32>]| forward_batch(imgs, w, policy, Realization::Gather, opts.rule);

    // warm caches and the allocator before any timing
    for _ in 0..opts.warmup {
        infer(&data.images[..opts.batch_size.min(data.len())])?;
    }
    let mut rates = Vec::with_capacity(opts.passes.max(1));
    let mut correct = 0;
    let mut fractions = Vec::with_capacity(data.len());
    let flops = FlopsModel::new(&w.config, policy.map(|p| p.locations.as_slice()).unwrap_or(&[]))?;
    for pass in 0..opts.passes.max(1) {
        let start = Instant::now();
        let mut outputs = Vec::new();
        for imgs in data.images.chunks(opts.batch_size) {
            outputs.push(infer(imgs)?);
        }
        rates.push(data.len() as f64 / start.elapsed().as_secs_f64());
        if pass == 0 {
            let labels = data.labels.chunks(opts.batch_size);
            for (inf, labels) in outputs.iter().zip(labels) {
                for (r, (trace, &label)) in inf.traces.iter().zip(labels).enumerate() {
                    correct += usize::from(argmax(inf.logits.row(r)) == label);
                    fractions.push(match opts.mode {
                        BenchMode::Dense => 1.0,
                        BenchMode::Pruned => {
                            let tokens: Vec<f64> = trace.kept_counts().iter().map(|&c| c as f64 + 1.0).collect();
                            flops.fraction_for_counts(&tokens)?
                        }
                    });
                }
            }
        }
    }
    rates.sort_by(f64::total_cmp);

    let mut latencies = Vec::with_capacity(opts.runs);
    for i in 0..opts.warmup + opts.runs {
        let img = std::slice::from_ref(&data.images[i % data.len()]);
        let start = Instant::now();
        infer(img)?;
        if i >= opts.warmup {
            latencies.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let (latency_mean_ms, latency_std_ms) = mean_std(&latencies);
    let flops_fraction = match opts.mode {
        BenchMode::Dense => 1.0,
        BenchMode::Pruned => fractions.iter().sum::<f64>() / fractions.len() as f64,
    };
    Ok(BenchResult {
        model_id: model_id.to_string(),
        mode: opts.mode,
        batch_size: opts.batch_size,
        budget_fraction: ckpt.prune.as_ref().map(|p| p.budget_fraction),
        flops_fraction,
        throughput: rates[rates.len() / 2],
        latency_mean_ms,
        latency_std_ms,
        accuracy: 100.0 * correct as f64 / data.len() as f64,
        images: data.len(),
        warmup: opts.warmup,
        runs: opts.runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::{load_eval, load_model};
    use crate::testutil::{tiny_config, trained};
    use asvit_core::train::{evaluate_thresholds, TrainConfig};

    #[test]
    fn dense_reports_unit_fraction_and_pruned_matches_masked_accuracy() {
        let t = trained();
        let ckpt = load_model(&t.model).unwrap();
        let data = load_eval(&tiny_config()).unwrap();
        let opts = BenchOptions {
            batch_size: 4,
            passes: 1,
            ..BenchOptions::default()
        };
        let dense = cmd_bench(&ckpt, "tiny", &data, &BenchOptions { mode: BenchMode::Dense, ..opts }).unwrap();
        assert_eq!(dense.flops_fraction, 1.0);
        assert!(dense.throughput > 0.0 && dense.latency_mean_ms > 0.0);
        let pruned = cmd_bench(&ckpt, "tiny", &data, &opts).unwrap();
        assert!(pruned.flops_fraction <= 1.0);
        let masked = evaluate_thresholds(
            &ckpt.weights,
            ckpt.prune.as_ref().unwrap(),
            &TrainConfig::default(),
            &data,
        )
        .unwrap();
        assert!((pruned.accuracy - masked.acc).abs() <= 0.2);
        assert!((pruned.flops_fraction - masked.flops_fraction).abs() < 1e-12);
        let one = cmd_bench(&ckpt, "tiny", &data, &BenchOptions { batch_size: 1, ..opts }).unwrap();
        assert_eq!(one.accuracy, pruned.accuracy);
    }

    #[test]
    fn rejects_short_timing_protocols() {
        let t = trained();
        let ckpt = load_model(&t.model).unwrap();
        let data = load_eval(&tiny_config()).unwrap();
        for opts in [
            BenchOptions { warmup: 9, ..BenchOptions::default() },
            BenchOptions { runs: 99, ..BenchOptions::default() },
        ] {
            assert!(cmd_bench(&ckpt, "tiny", &data, &opts).is_err());
        }
    }

    #[test]
    fn csv_has_header_and_row() {
        let r = BenchResult {
            model_id: "m".into(),
            mode: BenchMode::Dense,
            batch_size: 64,
            budget_fraction: None,
            flops_fraction: 1.0,
            throughput: 10.0,
            latency_mean_ms: 1.0,
            latency_std_ms: 0.5,
            accuracy: 50.0,
            images: 8,
            warmup: 10,
            runs: 100,
        };
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "m,dense,64,,1,10.000,1.0000,0.5000,50,8,10,100");
    }
}
