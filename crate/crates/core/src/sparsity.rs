//! Threshold masks, straight-through gradients and token selection rules.
//!
//! Masks always cover image tokens only. The class token is implicit and
//! never pruned.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::scoring::ScoreKind;
use crate::tape::{Tape, Var, MASK_BIAS};
use crate::tensor::{sigmoid, Tensor};

/// Where a stage's mask acts during full-length (masked) evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Pruned keys are biased out of every attention softmax.
    #[default]
    Attention,
    /// Pruned tokens' FFN sub-layer outputs are scaled by the mask.
    Activation,
}

/// Learnable-threshold pruning setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Number of blocks run before each pruning stage.
    pub locations: Vec<usize>,
    /// Initial threshold per stage.
    pub thresholds: Vec<f64>,
    /// Sigmoid temperature of the soft mask.
    pub temperature: f64,
    pub mask_strategy: MaskStrategy,
    /// Target mean cost as a fraction of the dense model.
    pub budget_fraction: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            locations: vec![4, 7, 10],
            thresholds: vec![0.001, 0.002, 0.003],
            temperature: 1e4,
            mask_strategy: MaskStrategy::Attention,
            budget_fraction: 0.65,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.locations.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("locations {:?} must be strictly increasing", self.locations));
        }
        if self.locations.iter().any(|&l| l == 0 || l >= num_layers) {
            return bad(format!(
                "locations {:?} must lie in 1..{num_layers}",
                self.locations
            ));
        }
        if self.thresholds.len() != self.locations.len() {
            return bad(format!(
                "{} thresholds for {} locations",
                self.thresholds.len(),
                self.locations.len()
            ));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 || !self.temperature.is_finite() {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return bad(format!("budget_fraction {} must lie in (0, 1]", self.budget_fraction));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return bad("thresholds must be finite".into());
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.locations.len()
    }
}

/// Mask state of one stage for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask {
    pub stage: usize,
    /// Binary keep flag per image token.
    pub hard: Vec<bool>,
    /// Soft mask values, present during training.
    pub soft: Option<Vec<f64>>,
    /// Indices of kept image tokens, ascending.
    pub kept_indices: Vec<usize>,
}

impl TokenMask {
    pub fn from_hard(stage: usize, hard: Vec<bool>) -> Self {
        let kept_indices = hard.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
        Self {
            stage,
            hard,
            soft: None,
            kept_indices,
        }
    }

    /// Logical AND with an earlier stage's mask.
    pub fn compose(&self, earlier: &TokenMask) -> Result<TokenMask> {
        if self.hard.len() != earlier.hard.len() {
            return shape_err("TokenMask::compose", &[self.hard.len()], &[earlier.hard.len()]);
        }
        let hard = self.hard.iter().zip(&earlier.hard).map(|(&a, &b)| a && b).collect();
        let mut out = TokenMask::from_hard(self.stage, hard);
        out.soft = match (&self.soft, &earlier.soft) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x * y).collect()),
            _ => None,
        };
        Ok(out)
    }
}

/// `1` where `score > θ`, else `0`.
pub fn hard_mask<T: Scalar>(scores: &[T], theta: T) -> Vec<T> {
    scores
        .iter()
        .map(|&s| if s > theta { T::one() } else { T::zero() })
        .collect()
}

/// `sigmoid(T·(s − θ))`.
pub fn soft_mask<T: Scalar>(scores: &[T], theta: T, temperature: T) -> Vec<T> {
    scores.iter().map(|&s| sigmoid(temperature * (s - theta))).collect()
}

/// Straight-through mask on a tape: forward [`hard_mask`], backward the
/// derivative of [`soft_mask`].
pub fn ste_mask<T: Scalar>(tape: &mut Tape<T>, scores: Var, theta: Var, temperature: T) -> Result<Var> {
    tape.ste_threshold(scores, theta, temperature)
}

/// Adds the mask bias to pruned image-token key columns of attention
/// logits `[rows, n + 1]`. Column 0 is the class token.
pub fn apply_attention_mask<T: Scalar>(keep: &[T], logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = logits.dims2()?;
    if keep.len() + 1 != cols {
        return shape_err("apply_attention_mask", logits.shape(), &[keep.len()]);
    }
    let bias: T = lit(MASK_BIAS);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (v, &k) in row[1..].iter_mut().zip(keep) {
            if k <= T::zero() {
                *v += bias;
            }
        }
    }
    Ok(out)
}

/// Scales FFN output rows `1..` (image tokens) by their mask values.
pub fn apply_activation_mask<T: Scalar>(mask: &[T], ffn_output: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, d) = ffn_output.dims2()?;
    if mask.len() + 1 != rows {
        return shape_err("apply_activation_mask", ffn_output.shape(), &[mask.len()]);
    }
    let mut out = ffn_output.clone();
    for (row, &m) in out.data_mut().chunks_mut(d).skip(1).zip(mask) {
        row.iter_mut().for_each(|v| *v *= m);
    }
    Ok(out)
}

/// Positions of the `k` highest scores, returned ascending. Ties go to the
/// lower position.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out: Vec<usize> = order.into_iter().take(k).collect();
    out.sort_unstable();
    out
}

/// Positions of the `k` lowest scores, ascending.
pub fn bottom_k<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let neg: Vec<T> = scores.iter().map(|&s| -s).collect();
    top_k(&neg, k)
}

/// `k` distinct positions out of `n` drawn uniformly, ascending.
pub fn random_k(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = sample(rng, n, k.min(n)).into_vec();
    out.sort_unstable();
    out
}

/// Keeps the `⌈ρ·n⌉` highest-scoring tokens.
pub fn fixed_ratio_topk<T: Scalar>(scores: &[T], rho: f64) -> Vec<bool> {
    let n = scores.len();
    let k = ((rho * n as f64).ceil() as usize).min(n);
    let mut keep = vec![false; n];
    top_k(scores, k).into_iter().for_each(|i| keep[i] = true);
    keep
}

/// Tokens surviving a threshold, gathered with the class token in front.
#[derive(Clone, Debug, PartialEq)]
pub struct Pruned<T> {
    pub tokens: Tensor<T>,
    /// Kept positions among the image tokens, ascending.
    pub kept_indices: Vec<usize>,
    /// Set when nothing passed the threshold and the top token was kept.
    pub forced: bool,
}

/// Positions with `score > θ`; when none pass, the single best one and a
/// `true` flag.
pub fn threshold_keep<T: Scalar>(scores: &[T], theta: T) -> (Vec<usize>, bool) {
    let kept: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > theta).collect();
    if kept.is_empty() && !scores.is_empty() {
        (top_k(scores, 1), true)
    } else {
        (kept, false)
    }
}

/// Discards image tokens at or below the threshold from `[n + 1, D]`.
pub fn prune_inference<T: Scalar>(tokens: &Tensor<T>, scores: &[T], theta: T) -> Result<Pruned<T>> {
    let (rows, _) = tokens.dims2()?;
    if scores.len() + 1 != rows {
        return shape_err("prune_inference", tokens.shape(), &[scores.len()]);
    }
    let (kept_indices, forced) = threshold_keep(scores, theta);
    let rows: Vec<usize> = std::iter::once(0).chain(kept_indices.iter().map(|i| i + 1)).collect();
    Ok(Pruned {
        tokens: tokens.gather_rows(&rows),
        kept_indices,
        forced,
    })
}

/// Shared keep count for a batch `[B, n]`: the mean per-image threshold
/// count, floored and clamped to `[1, n]`.
pub fn batch_k<T: Scalar>(scores: &Tensor<T>, theta: T) -> Result<usize> {
    let (b, n) = scores.dims2()?;
    if b == 0 || n == 0 {
        return Err(Error::Contract("batch_k needs a nonempty batch".into()));
    }
    let total = scores.data().iter().filter(|&&s| s > theta).count();
    Ok((total / b).clamp(1, n))
}

/// How a stage picks its surviving tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Selector {
    /// `score > θ` with the top-1 safeguard.
    #[default]
    Threshold,
    /// The `⌈ρ·n⌉` best candidates.
    TopRatio(f64),
    /// `counts[stage]` tokens chosen uniformly. The draw is seeded by
    /// `seed`, the stage and the image's own scores, so it does not depend
    /// on batch composition.
    RandomCount { seed: u64, counts: Vec<usize> },
    /// `counts[stage]` lowest-scoring tokens.
    LowestCount(Vec<usize>),
    /// Fixed original image-token indices per stage, intersected with the
    /// surviving candidates.
    Explicit(Vec<Vec<usize>>),
}

/// Everything inference needs to prune.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunePolicy {
    pub locations: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub score: ScoreKind,
    pub selector: Selector,
}

/// Result of [`PrunePolicy::select`].
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Kept positions within the candidate list, ascending.
    pub kept: Vec<usize>,
    pub forced: bool,
}

impl PrunePolicy {
    /// Threshold policy from a configuration.
    pub fn from_config(cfg: &PruneConfig) -> Self {
        Self {
            locations: cfg.locations.clone(),
            thresholds: cfg.thresholds.clone(),
            score: ScoreKind::HeadWeighted,
            selector: Selector::Threshold,
        }
    }

    pub fn with_selector(mut self, selector: Selector) -> Self {
        self.selector = selector;
        self
    }

    pub fn with_score(mut self, score: ScoreKind) -> Self {
        self.score = score;
        self
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let probe = PruneConfig {
            locations: self.locations.clone(),
            thresholds: self.thresholds.clone(),
            ..PruneConfig::default()
        };
        probe.validate(num_layers)?;
        let per_stage = match &self.selector {
            Selector::Explicit(sets) => Some(sets.len()),
            Selector::RandomCount { counts, .. } | Selector::LowestCount(counts) => Some(counts.len()),
            _ => None,
        };
        if let Some(len) = per_stage {
            if len != self.locations.len() {
                return Err(Error::Config(format!(
                    "{len} per-stage selector entries for {} stages",
                    self.locations.len()
                )));
            }
        }
        if let Selector::TopRatio(rho) = self.selector {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!("keep ratio {rho} must lie in (0, 1]")));
            }
        }
        Ok(())
    }

    /// Stage index that fires after `blocks_done` blocks, if any.
    pub fn stage_after(&self, blocks_done: usize) -> Option<usize> {
        self.locations.iter().position(|&l| l == blocks_done)
    }

    /// Chooses survivors among `candidates` (original image-token indices)
    /// given their scores.
    pub fn select<T: Scalar>(&self, stage: usize, candidates: &[usize], scores: &[T]) -> Selection {
        let theta: T = lit(self.thresholds[stage]);
        let n = candidates.len();
        let kept = match &self.selector {
            Selector::Threshold => {
                let (kept, forced) = threshold_keep(scores, theta);
                return Selection { kept, forced };
            }
            Selector::TopRatio(rho) => fixed_ratio_topk(scores, *rho)
                .into_iter()
                .enumerate()
                .filter(|(_, k)| *k)
                .map(|(i, _)| i)
                .collect(),
            Selector::RandomCount { seed, counts } => {
                let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(*seed, stage, scores));
                random_k(n, counts[stage].min(n), &mut rng)
            }
            Selector::LowestCount(counts) => bottom_k(scores, counts[stage].min(n)),
            Selector::Explicit(sets) => (0..n).filter(|&p| sets[stage].contains(&candidates[p])).collect(),
        };
        if kept.is_empty() && n > 0 {
            Selection {
                kept: top_k(scores, 1),
                forced: true,
            }
        } else {
            Selection { kept, forced: false }
        }
    }
}

fn draw_seed<T: Scalar>(seed: u64, stage: usize, scores: &[T]) -> u64 {
    // FNV-1a over the score bit patterns
    let mut h = 0xcbf29ce484222325u64 ^ seed.rotate_left(17) ^ stage as u64;
    for s in scores {
        let bits = s.to_f64().unwrap_or(0.0).to_bits();
        h ^= bits;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
