use crate::data::Dataset;
use crate::error::Result;
use crate::flops::FlopsModel;
use crate::sparsity::{PrunePolicy, Selector};
use crate::vit::{forward_batch, BatchRule, Inference, Realization, ViTWeights};

/// Accuracy and cost of one pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Percent correct.
    pub acc: f64,
    pub flops_fraction: f64,
    /// Mean image tokens kept after each stage.
    pub kept_mean: Vec<f64>,
    /// Image tokens kept after each stage, per image.
    pub kept: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
    /// Images where some stage fell back to its single best token.
    pub forced: usize,
}

struct Tally {
    flops: FlopsModel,
    stages: usize,
    correct: usize,
    fractions: Vec<f64>,
    kept: Vec<Vec<usize>>,
    predictions: Vec<usize>,
    forced: usize,
}

impl Tally {
    fn new(w: &ViTWeights<f32>, locations: &[usize]) -> Result<Self> {
        Ok(Self {
            flops: FlopsModel::new(&w.config, locations)?,
            stages: locations.len(),
            correct: 0,
            fractions: Vec::new(),
            kept: Vec::new(),
            predictions: Vec::new(),
            forced: 0,
        })
    }

    fn add(&mut self, inf: &Inference<f32>, labels: &[usize]) -> Result<()> {
        for (r, (trace, &label)) in inf.traces.iter().zip(labels).enumerate() {
            let pred = argmax(inf.logits.row(r));
            self.correct += usize::from(pred == label);
            self.predictions.push(pred);
            let counts = trace.kept_counts();
            let tokens: Vec<f64> = counts.iter().map(|&c| c as f64 + 1.0).collect();
            self.fractions.push(if tokens.is_empty() {
                1.0
            } else {
                self.flops.fraction_for_counts(&tokens)?
            });
            self.forced += usize::from(trace.any_forced());
            self.kept.push(counts);
        }
        Ok(())
    }

    fn finish(self) -> EvalReport {
        let n = self.predictions.len().max(1) as f64;
        let kept_mean = (0..self.stages)
            .map(|s| self.kept.iter().map(|k| k[s] as f64).sum::<f64>() / n)
            .collect();
        EvalReport {
            acc: 100.0 * self.correct as f64 / n,
            flops_fraction: self.fractions.iter().sum::<f64>() / n,
            kept_mean,
            kept: self.kept,
            predictions: self.predictions,
            forced: self.forced,
        }
    }
}

/// Evaluates in chunks of `chunk` images.
pub fn evaluate(
    w: &ViTWeights<f32>,
    policy: Option<&PrunePolicy>,
    data: &Dataset,
    realization: Realization,
    rule: BatchRule,
    chunk: usize,
) -> Result<EvalReport> {
    let locations = policy.map(|p| p.locations.clone()).unwrap_or_default();
    let mut tally = Tally::new(w, &locations)?;
    for (imgs, labels) in data.images.chunks(chunk.max(1)).zip(data.labels.chunks(chunk.max(1))) {
        tally.add(&forward_batch(imgs, w, policy, realization, rule)?, labels)?;
    }
    Ok(tally.finish())
}

/// Token selection of one arm in a matched-cost comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchedArm {
    /// The threshold policy itself.
    Adaptive,
    /// Uniformly drawn tokens.
    Random { seed: u64 },
    /// Lowest-scoring tokens.
    Lowest,
}

/// Evaluates `arm` so that every image keeps, at every stage, exactly as
/// many tokens as the threshold `policy` keeps on it. All arms therefore
/// share one cost per image.
pub fn evaluate_matched(
    w: &ViTWeights<f32>,
    policy: &PrunePolicy,
    data: &Dataset,
    arm: MatchedArm,
    realization: Realization,
) -> Result<EvalReport> {
    let mut tally = Tally::new(w, &policy.locations)?;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let imgs = std::slice::from_ref(img);
        let adaptive = forward_batch(imgs, w, Some(policy), realization, BatchRule::PerImage)?;
        let counts = adaptive.traces[0].kept_counts();
        let selector = match arm {
            MatchedArm::Adaptive => {
                tally.add(&adaptive, &[label])?;
                continue;
            }
            MatchedArm::Random { seed } => Selector::RandomCount { seed, counts },
            MatchedArm::Lowest => Selector::LowestCount(counts),
        };
        let arm_policy = policy.clone().with_selector(selector);
        tally.add(
            &forward_batch(imgs, w, Some(&arm_policy), realization, BatchRule::PerImage)?,
            &[label],
        )?;
    }
    Ok(tally.finish())
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
