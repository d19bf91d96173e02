//! Differentiable full-length forward pass used for training.
//!
//! Pruned tokens are never dropped here; their effect is reproduced by
//! masks, so gradients reach the thresholds through the mask values.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{forward::extract_patches, ModelConfig, ViTParams, LN_EPS};
use crate::error::Result;
use crate::scalar::{lit, Scalar};
use crate::scoring::{tape_token_scores, ScoreKind};
use crate::sparsity::{MaskStrategy, PrunePolicy};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Registers shared parameter tensors on a tape.
pub fn tape_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ViTParams<Arc<Tensor<T>>>,
    requires_grad: bool,
) -> ViTParams<Var> {
    params.map(|_, t| tape.shared_leaf(Arc::clone(t), requires_grad))
}

/// Mask value used in the forward pass of a learned stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Binary forward, sigmoid gradient.
    #[default]
    Ste,
    /// Sigmoid forward and gradient.
    Soft,
}

/// How stage boundaries behave in [`tape_forward`].
#[derive(Clone, Debug)]
pub enum StageMasking<T> {
    Dense,
    /// Threshold stages driven by tape variables.
    Learned {
        locations: Vec<usize>,
        /// One single-element variable per stage.
        thetas: Vec<Var>,
        temperature: T,
        mode: MaskMode,
        /// Cut the gradient path from the mask back into the scores.
        detach_score: bool,
        score: ScoreKind,
    },
    /// Constant masks chosen by an inference policy.
    Fixed(PrunePolicy),
}

impl<T> StageMasking<T> {
    fn stage_after(&self, blocks_done: usize) -> Option<usize> {
        match self {
            Self::Dense => None,
            Self::Learned { locations, .. } => locations.iter().position(|&l| l == blocks_done),
            Self::Fixed(p) => p.stage_after(blocks_done),
        }
    }
}

/// One stage of a [`TapeForward`].
#[derive(Clone, Debug)]
pub struct TapeStage {
    /// `[N]` scores over all image tokens.
    pub scores: Var,
    /// `[N]` effective mask after composing with earlier stages.
    pub mask: Var,
    /// Scalar token count `1 + Σ mask`.
    pub count: Var,
    /// Image tokens whose binary mask is set.
    pub kept: Vec<usize>,
    /// The all-pruned safeguard fired.
    pub forced: bool,
}

#[derive(Clone, Debug)]
pub struct TapeForward {
    /// `[num_classes]`.
    pub logits: Var,
    pub stages: Vec<TapeStage>,
}

/// Forward pass on the tape for one `[C, H, W]` image.
pub fn tape_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ViTParams<Var>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    masking: &StageMasking<T>,
    strategy: MaskStrategy,
) -> Result<TapeForward> {
    let eps: T = lit(LN_EPS);
    let (d, heads, dh) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
    let n = cfg.num_tokens();
    let n_img = cfg.num_patches();
    let scale: T = lit(1.0 / (dh as f64).sqrt());

    let patches = tape.constant(extract_patches(image, cfg)?);
    let tokens = tape.linear(patches, params.patch_w, params.patch_b)?;
    let seq = tape.concat_rows(&[params.cls_token, tokens])?;
    let mut x = tape.add(seq, params.pos_embed)?;

    // product of earlier binary masks, and the mask the layers currently see
    let mut hard_prev: Option<Var> = None;
    let mut active: Option<Var> = None;
    let mut stages = Vec::new();

    for (l, b) in params.blocks.iter().enumerate() {
        let h = tape.layernorm(x, b.norm1_g, b.norm1_b, eps)?;
        let qkv = tape.linear(h, b.qkv_w, b.qkv_b)?;
        let mut ctx = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let o = hd * dh;
            let q = tape.slice(qkv, 0..n, o..o + dh)?;
            let k = tape.slice(qkv, 0..n, d + o..d + o + dh)?;
            let v = tape.slice(qkv, 0..n, 2 * d + o..2 * d + o + dh)?;
            let logits = tape.matmul_nt(q, k)?;
            let logits = tape.scale(logits, scale);
            let p = match (active, strategy) {
                (Some(m), MaskStrategy::Attention) => tape.masked_softmax(logits, m)?,
                _ => tape.softmax(logits),
            };
            ctx.push(tape.matmul(p, v)?);
            probs.push(p);
        }
        let cat = tape.concat_cols(&ctx)?;
        let attn = tape.linear(cat, b.proj_w, b.proj_b)?;
        x = tape.add(x, attn)?;
        let h2 = tape.layernorm(x, b.norm2_g, b.norm2_b, eps)?;
        let hid = tape.linear(h2, b.fc1_w, b.fc1_b)?;
        let hid = tape.gelu(hid);
        let mut f = tape.linear(hid, b.fc2_w, b.fc2_b)?;
        if let (Some(m), MaskStrategy::Activation) = (active, strategy) {
            f = tape.scale_rows(f, m, 1)?;
        }
        x = tape.add(x, f)?;

        let Some(stage) = masking.stage_after(l + 1) else {
            continue;
        };
        let prev_keep: Vec<bool> = match hard_prev {
            Some(m) => tape.value(m).data().iter().map(|&v| v > T::zero()).collect(),
            None => vec![true; n_img],
        };
        let (scores, cur_hard, cur_soft) = match masking {
            StageMasking::Dense => unreachable!("dense masking has no stages"),
            StageMasking::Learned {
                thetas,
                temperature,
                mode,
                detach_score,
                score,
                ..
            } => {
                let mut s = tape_token_scores(tape, &ctx, &probs, *score)?;
                if *detach_score {
                    s = tape.detach(s);
                }
                let hard = tape.ste_threshold(s, thetas[stage], *temperature)?;
                let soft = match mode {
                    MaskMode::Ste => hard,
                    MaskMode::Soft => tape.soft_threshold(s, thetas[stage], *temperature)?,
                };
                (s, hard, soft)
            }
            StageMasking::Fixed(policy) => {
                let s = tape_token_scores(tape, &ctx, &probs, policy.score)?;
                let s = tape.detach(s);
                let all = tape.value(s).data().to_vec();
                let candidates: Vec<usize> = (0..n_img).filter(|&i| prev_keep[i]).collect();
                let cand_scores: Vec<T> = candidates.iter().map(|&i| all[i]).collect();
                let sel = policy.select(stage, &candidates, &cand_scores);
                let mut m = vec![T::zero(); n_img];
                sel.kept.iter().for_each(|&p| m[candidates[p]] = T::one());
                let m = tape.constant(Tensor::vector(m));
                (s, m, m)
            }
        };
        let (mut hard, mut eff) = match hard_prev {
            Some(prev) => (tape.mul(cur_hard, prev)?, tape.mul(cur_soft, prev)?),
            None => (cur_hard, cur_soft),
        };
        let mut forced = false;
        if tape.value(hard).data().iter().all(|&v| v <= T::zero()) {
            let sv = tape.value(scores).data();
            let best = (0..n_img)
                .filter(|&i| prev_keep[i])
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(b) if sv[b] >= sv[i] => Some(b),
                    _ => Some(i),
                })
                .unwrap_or(0);
            let mut onehot = vec![T::zero(); n_img];
            onehot[best] = T::one();
            let onehot = tape.constant(Tensor::vector(onehot));
            hard = tape.add(hard, onehot)?;
            if tape.value(eff).data()[best] <= T::zero() {
                eff = tape.add(eff, onehot)?;
            }
            forced = true;
        }
        let kept = tape
            .value(hard)
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > T::zero())
            .map(|(i, _)| i)
            .collect();
        let total = tape.sum(eff);
        let count = tape.add_scalar(total, T::one());
        stages.push(TapeStage {
            scores,
            mask: eff,
            count,
            kept,
            forced,
        });
        hard_prev = Some(hard);
        active = Some(eff);
    }

    let cls = tape.slice(x, 0..1, 0..d)?;
    let cls = tape.layernorm(cls, params.norm_g, params.norm_b, eps)?;
    let logits = tape.linear(cls, params.head_w, params.head_b)?;
    let logits = tape.reshape(logits, &[cfg.num_classes])?;
    Ok(TapeForward { logits, stages })
}

#[cfg(test)]
mod tests {
    use super::super::{forward, forward_masked, ViTWeights};
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::sparsity::{PruneConfig, Selector};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            in_chans: 1,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 3,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    fn image(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 8, 8], |_| rng.gen_range(-1.0..1.0))
    }

    fn shared(w: &ViTWeights<f64>) -> ViTParams<Arc<Tensor<f64>>> {
        w.params.map(|_, t| Arc::new(t.clone()))
    }

    #[test]
    fn dense_tape_matches_plain_forward() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 1).unwrap();
        let img = image(2);
        let mut tape = Tape::new();
        let p = tape_params(&mut tape, &shared(&w), true);
        let out = tape_forward(&mut tape, &p, &cfg, &img, &StageMasking::Dense, MaskStrategy::Attention).unwrap();
        let (plain, _) = forward(&img, &w, None).unwrap();
        assert!(tape.value(out.logits).max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn fixed_policy_matches_masked_forward() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 3).unwrap();
        let img = image(4);
        let policy = PrunePolicy::from_config(&PruneConfig {
            locations: vec![1, 2],
            thresholds: vec![0.05, 0.07],
            ..PruneConfig::default()
        });
        for strategy in [MaskStrategy::Attention, MaskStrategy::Activation] {
            let mut tape = Tape::new();
            let p = tape_params(&mut tape, &shared(&w), false);
            let out = tape_forward(&mut tape, &p, &cfg, &img, &StageMasking::Fixed(policy.clone()), strategy).unwrap();
            let (plain, trace) = forward_masked(&img, &w, Some(&policy), strategy).unwrap();
            assert!(tape.value(out.logits).max_abs_diff(&plain) < 1e-10);
            let kept: Vec<Vec<usize>> = out.stages.iter().map(|s| s.kept.clone()).collect();
            let expected: Vec<Vec<usize>> = trace.stages.iter().map(|s| s.kept.clone()).collect();
            assert_eq!(kept, expected);
        }
    }

    #[test]
    fn learned_ste_forward_matches_threshold_policy() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 5).unwrap();
        let img = image(6);
        let thresholds = vec![0.05, 0.06];
        let mut tape = Tape::new();
        let p = tape_params(&mut tape, &shared(&w), true);
        let thetas = thresholds.iter().map(|&t| tape.param(Tensor::vector(vec![t]))).collect();
        let masking = StageMasking::Learned {
            locations: vec![1, 2],
            thetas,
            temperature: 1e4,
            mode: MaskMode::Ste,
            detach_score: false,
            score: ScoreKind::HeadWeighted,
        };
        let out = tape_forward(&mut tape, &p, &cfg, &img, &masking, MaskStrategy::Attention).unwrap();
        let policy = PrunePolicy::from_config(&PruneConfig {
            locations: vec![1, 2],
            thresholds,
            ..PruneConfig::default()
        });
        let (g, trace) = forward(&img, &w, Some(&policy)).unwrap();
        assert!(tape.value(out.logits).max_abs_diff(&g) < 1e-8);
        for (s, t) in out.stages.iter().zip(&trace.stages) {
            assert_eq!(s.kept, t.kept);
            assert_eq!(tape.value(s.count).data()[0], 1.0 + t.kept.len() as f64);
        }
    }

    #[test]
    fn soft_counts_gradient_matches_fd() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 7).unwrap();
        let img = image(8);
        let sw = shared(&w);
        let f = |tape: &mut Tape<f64>, theta: Var| -> Result<Var> {
            let p = tape_params(tape, &sw, false);
            // one stage: later stages multiply in an STE mask, which has no
            // finite-difference counterpart
            let masking = StageMasking::Learned {
                locations: vec![1],
                thetas: vec![theta],
                temperature: 50.0,
                mode: MaskMode::Soft,
                detach_score: true,
                score: ScoreKind::HeadWeighted,
            };
            let out = tape_forward(tape, &p, &cfg, &img, &masking, MaskStrategy::Attention)?;
            let ce = tape.cross_entropy(out.logits, 1)?;
            let ce = tape.reshape(ce, &[1])?;
            let tot = tape.add(out.stages[0].count, ce)?;
            Ok(tape.sum(tot))
        };
        let err = finite_diff_check(f, &Tensor::vector(vec![0.06]), 1e-6).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn explicit_masks_compose_monotonically() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 9).unwrap();
        let policy = PrunePolicy::from_config(&PruneConfig {
            locations: vec![1, 2],
            thresholds: vec![0.0, 0.0],
            ..PruneConfig::default()
        })
        .with_selector(Selector::Explicit(vec![vec![0, 1, 2, 3], vec![2, 3, 4, 5]]));
        let mut tape = Tape::new();
        let p = tape_params(&mut tape, &shared(&w), false);
        let out = tape_forward(&mut tape, &p, &cfg, &image(1), &StageMasking::Fixed(policy), MaskStrategy::Attention)
            .unwrap();
        assert_eq!(out.stages[1].kept, vec![2, 3]);
    }
}
