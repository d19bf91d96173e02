//! Gradient-free forward pass.
//!
//! Pruning is realized in one of two ways. [`Realization::Gather`]
//! physically drops tokens between stages, which is what makes pruned
//! inference cheaper. [`Realization::Mask`] keeps the full sequence and
//! masks pruned tokens instead; it mirrors what training sees and serves
//! as the oracle for the gathered path.

use super::{BlockParams, ViTWeights, LN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::scoring::{score_layer, LayerScores, ScoreReport, StageReport};
use crate::sparsity::{apply_activation_mask, batch_k, threshold_keep, top_k, MaskStrategy, PrunePolicy, Selection, Selector};
use crate::tape::MASK_BIAS;
use crate::tensor::{softmax_in_place, Tensor};

/// Per-layer values token scoring reads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnIntermediates<T> {
    /// `[H, n, Dh]` per-head attention output before concatenation.
    pub ctx_per_head: Tensor<T>,
    /// `[H, n − 1]` class-token attention over image tokens.
    pub cls_attn: Tensor<T>,
}

/// Flattens a `[C, H, W]` image into `[N, C·p·p]` patch rows. Patches run
/// row-major over the grid; within a patch the order is channel, row,
/// column.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, cfg: &super::ModelConfig) -> Result<Tensor<T>> {
    let (c, s, p) = (cfg.in_chans, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return shape_err("extract_patches", image.shape(), &[c, s, s]);
    }
    let g = cfg.grid();
    let src = image.data();
    let mut data = Vec::with_capacity(g * g * c * p * p);
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for py in 0..p {
                    let row = (ch * s + gy * p + py) * s + gx * p;
                    data.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new([g * g, c * p * p], data)
}

/// Patch projection, class token in front, positions added: `[N + 1, D]`.
pub fn patch_embed<T: Scalar>(image: &Tensor<T>, w: &ViTWeights<T>) -> Result<Tensor<T>> {
    let p = &w.params;
    let tokens = extract_patches(image, &w.config)?.linear(&p.patch_w, &p.patch_b)?;
    Tensor::concat_rows(&[&p.cls_token, &tokens])?.add(&p.pos_embed)
}

/// Multi-head self-attention on `x: [n, D]` (no norm, no residual).
///
/// `keep` masks image-token keys: entry `j` covers row `j + 1`, and a
/// nonpositive entry biases that key column out of every softmax row.
pub fn mhsa_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &BlockParams<Tensor<T>>,
    num_heads: usize,
    keep: Option<&[T]>,
) -> Result<(Tensor<T>, AttnIntermediates<T>)> {
    let (n, d) = x.dims2()?;
    if d % num_heads != 0 || n == 0 {
        return shape_err("mhsa_forward", x.shape(), &[num_heads]);
    }
    if let Some(k) = keep {
        if k.len() + 1 != n {
            return shape_err("mhsa_forward keep mask", x.shape(), &[k.len()]);
        }
    }
    let dh = d / num_heads;
    let qkv = x.linear(&block.qkv_w, &block.qkv_b)?;
    let q = qkv.data();
    let stride = 3 * d;
    let scale: T = lit(1.0 / (dh as f64).sqrt());
    let bias: T = lit(MASK_BIAS);
    let mut ctx_heads = vec![T::zero(); num_heads * n * dh];
    let mut cls_attn = Vec::with_capacity(num_heads * (n - 1));
    let mut probs = vec![T::zero(); n * n];
    for h in 0..num_heads {
        let off = h * dh;
        T::gemm(n, dh, n, &q[off..], (stride, 1), &q[d + off..], (1, stride), &mut probs, false);
        for row in probs.chunks_mut(n) {
            row.iter_mut().for_each(|v| *v *= scale);
            if let Some(k) = keep {
                for (v, &m) in row[1..].iter_mut().zip(k) {
                    if m <= T::zero() {
                        *v += bias;
                    }
                }
            }
            softmax_in_place(row);
        }
        cls_attn.extend_from_slice(&probs[1..n]);
        let ctx = &mut ctx_heads[h * n * dh..(h + 1) * n * dh];
        T::gemm(n, n, dh, &probs, (n, 1), &q[2 * d + off..], (stride, 1), ctx, false);
    }
    // out = Σ_h ctx_h · W_proj[h·Dh .. (h+1)·Dh, :]
    let mut out = vec![T::zero(); n * d];
    let wp = block.proj_w.data();
    for h in 0..num_heads {
        let ctx = &ctx_heads[h * n * dh..(h + 1) * n * dh];
        T::gemm(n, dh, d, ctx, (dh, 1), &wp[h * dh * d..], (d, 1), &mut out, h > 0);
    }
    let out = Tensor::new([n, d], out)?.add_row_bias(&block.proj_b)?;
    let inter = AttnIntermediates {
        ctx_per_head: Tensor::new([num_heads, n, dh], ctx_heads)?,
        cls_attn: Tensor::new([num_heads, n - 1], cls_attn)?,
    };
    Ok((out, inter))
}

/// Two-layer GELU MLP on `x: [n, D]` (no norm, no residual).
pub fn ffn_forward<T: Scalar>(x: &Tensor<T>, block: &BlockParams<Tensor<T>>) -> Result<Tensor<T>> {
    x.linear(&block.fc1_w, &block.fc1_b)?
        .gelu()
        .linear(&block.fc2_w, &block.fc2_b)
}

/// One pre-norm transformer block. `mask`, when given, covers the image
/// tokens of `x` and acts per `strategy`.
pub fn block_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &BlockParams<Tensor<T>>,
    num_heads: usize,
    mask: Option<&[T]>,
    strategy: MaskStrategy,
) -> Result<(Tensor<T>, AttnIntermediates<T>)> {
    let eps: T = lit(LN_EPS);
    let attn_keep = mask.filter(|_| strategy == MaskStrategy::Attention);
    let h = x.layernorm(&block.norm1_g, &block.norm1_b, eps)?;
    let (a, inter) = mhsa_forward(&h, block, num_heads, attn_keep)?;
    let x = x.add(&a)?;
    let mut f = ffn_forward(&x.layernorm(&block.norm2_g, &block.norm2_b, eps)?, block)?;
    if let (Some(m), MaskStrategy::Activation) = (mask, strategy) {
        f = apply_activation_mask(m, &f)?;
    }
    Ok((x.add(&f)?, inter))
}

/// What one pruning stage did to one image.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace<T> {
    pub stage: usize,
    /// Blocks run before this stage.
    pub layer: usize,
    /// Original image-token indices that were eligible.
    pub candidates: Vec<usize>,
    /// Scores of the candidates, restricted to their columns.
    pub scores: LayerScores<T>,
    /// Original indices that survived, ascending.
    pub kept: Vec<usize>,
    /// Nothing passed the rule and the top token was kept instead.
    pub forced: bool,
}

/// Stage-by-stage pruning record of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTrace<T> {
    pub stages: Vec<StageTrace<T>>,
}

impl<T: Scalar> ScoreTrace<T> {
    /// Image tokens kept after each stage.
    pub fn kept_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.kept.len()).collect()
    }

    /// 0/1 keep flags over the `grid × grid` patch lattice after `stage`.
    pub fn keep_grid(&self, stage: usize, num_patches: usize) -> Vec<u8> {
        let mut out = vec![0u8; num_patches];
        if let Some(st) = self.stages.get(stage) {
            st.kept.iter().for_each(|&i| out[i] = 1);
        }
        out
    }

    pub fn any_forced(&self) -> bool {
        self.stages.iter().any(|s| s.forced)
    }

    /// Scoring export with one row per candidate token.
    pub fn report(&self) -> ScoreReport<T> {
        ScoreReport {
            stages: self
                .stages
                .iter()
                .map(|s| StageReport {
                    stage: s.stage,
                    token_indices: s.candidates.clone(),
                    scores: s.scores.clone(),
                    kept: s.candidates.iter().map(|c| s.kept.binary_search(c).is_ok()).collect(),
                })
                .collect(),
        }
    }
}

/// How pruning decisions are applied to the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Realization {
    /// Drop pruned tokens.
    Gather,
    /// Keep the full sequence and mask pruned tokens.
    Mask(MaskStrategy),
}

/// How a threshold policy treats a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BatchRule {
    /// Every image applies the threshold on its own.
    #[default]
    PerImage,
    /// Every image keeps its top `k` tokens, `k` the batch-mean threshold
    /// count. A batch of one reduces to [`BatchRule::PerImage`].
    BatchK,
}

/// Logits and pruning traces for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    /// `[B, num_classes]`.
    pub logits: Tensor<T>,
    pub traces: Vec<ScoreTrace<T>>,
}

struct Stream<T> {
    x: Tensor<T>,
    /// Surviving original image-token indices, ascending.
    candidates: Vec<usize>,
    /// Full-length keep mask in masked mode.
    keep: Option<Vec<T>>,
    trace: ScoreTrace<T>,
}

impl<T: Scalar> Stream<T> {
    /// Scores of the candidates; in masked mode the full-length score
    /// columns are narrowed to them.
    fn candidate_scores(&self, inter: &AttnIntermediates<T>, policy: &PrunePolicy) -> Result<LayerScores<T>> {
        let full = score_layer(inter, policy.score)?;
        if self.keep.is_none() {
            return Ok(full);
        }
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let (h, _) = t.dims2()?;
            let data = (0..h)
                .flat_map(|r| self.candidates.iter().map(move |&c| t.at2(r, c)))
                .collect();
            Tensor::new([h, self.candidates.len()], data)
        };
        Ok(LayerScores {
            head_importance: pick(&full.head_importance)?,
            head_weights: pick(&full.head_weights)?,
            token_scores: Tensor::vector(self.candidates.iter().map(|&c| full.token_scores.data()[c]).collect()),
        })
    }

    fn apply(&mut self, stage: usize, layer: usize, scores: LayerScores<T>, sel: Selection) {
        let kept: Vec<usize> = sel.kept.iter().map(|&p| self.candidates[p]).collect();
        match &mut self.keep {
            Some(keep) => {
                keep.iter_mut().for_each(|v| *v = T::zero());
                kept.iter().for_each(|&i| keep[i] = T::one());
            }
            None => {
                let rows: Vec<usize> = std::iter::once(0).chain(sel.kept.iter().map(|p| p + 1)).collect();
                self.x = self.x.gather_rows(&rows);
            }
        }
        self.trace.stages.push(StageTrace {
            stage,
            layer,
            candidates: std::mem::replace(&mut self.candidates, kept.clone()),
            scores,
            kept,
            forced: sel.forced,
        });
    }
}

/// Batched forward pass with optional pruning.
pub fn forward_batch<T: Scalar>(
    images: &[Tensor<T>],
    w: &ViTWeights<T>,
    policy: Option<&PrunePolicy>,
    realization: Realization,
    rule: BatchRule,
) -> Result<Inference<T>> {
    let cfg = &w.config;
    if images.is_empty() {
        return Err(Error::Contract("forward_batch needs at least one image".into()));
    }
    if let Some(p) = policy {
        p.validate(cfg.num_layers)?;
    }
    let n_img = cfg.num_patches();
    let (strategy, masked) = match realization {
        Realization::Gather => (MaskStrategy::Attention, false),
        Realization::Mask(s) => (s, true),
    };
    let mut streams = images
        .iter()
        .map(|img| {
            Ok(Stream {
                x: patch_embed(img, w)?,
                candidates: (0..n_img).collect(),
                keep: None,
                trace: ScoreTrace::default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let batch_rule = rule == BatchRule::BatchK
        && images.len() > 1
        && policy.is_some_and(|p| p.selector == Selector::Threshold);

    for (l, block) in w.params.blocks.iter().enumerate() {
        let stage = policy.and_then(|p| p.stage_after(l + 1));
        let mut inters = Vec::with_capacity(streams.len());
        for s in &mut streams {
            let (x, inter) = block_forward(&s.x, block, cfg.num_heads, s.keep.as_deref(), strategy)?;
            s.x = x;
            inters.push(inter);
        }
        let (Some(stage), Some(policy)) = (stage, policy) else {
            continue;
        };
        let scored = streams
            .iter()
            .zip(&inters)
            .map(|(s, i)| s.candidate_scores(i, policy))
            .collect::<Result<Vec<_>>>()?;
        let selections: Vec<Selection> = if batch_rule {
            let theta: T = lit(policy.thresholds[stage]);
            let n = scored[0].token_scores.len();
            if scored.iter().any(|s| s.token_scores.len() != n) {
                return Err(Error::Contract("batch top-k needs equal candidate counts".into()));
            }
            let all: Vec<T> = scored.iter().flat_map(|s| s.token_scores.data().to_vec()).collect();
            let k = batch_k(&Tensor::new([scored.len(), n], all)?, theta)?;
            scored
                .iter()
                .map(|s| {
                    let passed = threshold_keep(s.token_scores.data(), theta);
                    Selection {
                        kept: top_k(s.token_scores.data(), k),
                        forced: passed.1,
                    }
                })
                .collect()
        } else {
            streams
                .iter()
                .zip(&scored)
                .map(|(s, sc)| policy.select(stage, &s.candidates, sc.token_scores.data()))
                .collect()
        };
        for ((s, sc), sel) in streams.iter_mut().zip(scored).zip(selections) {
            if masked && s.keep.is_none() {
                s.keep = Some(vec![T::one(); n_img]);
            }
            s.apply(stage, l + 1, sc, sel);
        }
    }

    let p = &w.params;
    let eps: T = lit(LN_EPS);
    let cls_rows: Vec<T> = streams.iter().flat_map(|s| s.x.row(0).to_vec()).collect();
    let cls = Tensor::new([streams.len(), cfg.embed_dim], cls_rows)?;
    let logits = cls.layernorm(&p.norm_g, &p.norm_b, eps)?.linear(&p.head_w, &p.head_b)?;
    Ok(Inference {
        logits,
        traces: streams.into_iter().map(|s| s.trace).collect(),
    })
}

fn single<T: Scalar>(inf: Inference<T>) -> (Tensor<T>, ScoreTrace<T>) {
    let c = inf.logits.last_dim();
    let logits = Tensor::vector(inf.logits.into_data()).reshape([c]).expect("one row");
    let trace = inf.traces.into_iter().next().unwrap_or_default();
    (logits, trace)
}

/// One image, pruned tokens physically discarded.
pub fn forward<T: Scalar>(
    image: &Tensor<T>,
    w: &ViTWeights<T>,
    policy: Option<&PrunePolicy>,
) -> Result<(Tensor<T>, ScoreTrace<T>)> {
    let inf = forward_batch(std::slice::from_ref(image), w, policy, Realization::Gather, BatchRule::PerImage)?;
    Ok(single(inf))
}

/// One image, full length, pruned tokens masked per `strategy`.
pub fn forward_masked<T: Scalar>(
    image: &Tensor<T>,
    w: &ViTWeights<T>,
    policy: Option<&PrunePolicy>,
    strategy: MaskStrategy,
) -> Result<(Tensor<T>, ScoreTrace<T>)> {
    let inf = forward_batch(
        std::slice::from_ref(image),
        w,
        policy,
        Realization::Mask(strategy),
        BatchRule::PerImage,
    )?;
    Ok(single(inf))
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::sparsity::PruneConfig;
    use crate::tensor::gelu;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            in_chans: 2,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 4,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([cfg.in_chans, cfg.image_size, cfg.image_size], |_| rng.gen_range(-1.0..1.0))
    }

    fn random_block(d: usize, hidden: usize, seed: u64) -> BlockParams<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |s: &[usize]| Tensor::from_fn(s.to_vec(), |_| rng.gen_range(-0.5..0.5));
        BlockParams {
            norm1_g: t(&[d]),
            norm1_b: t(&[d]),
            qkv_w: t(&[d, 3 * d]),
            qkv_b: t(&[3 * d]),
            proj_w: t(&[d, d]),
            proj_b: t(&[d]),
            norm2_g: t(&[d]),
            norm2_b: t(&[d]),
            fc1_w: t(&[d, hidden]),
            fc1_b: t(&[hidden]),
            fc2_w: t(&[hidden, d]),
            fc2_b: t(&[d]),
        }
    }

    #[test]
    fn patch_embed_zero_case() {
        let cfg = small();
        let mut w = ViTWeights::<f64>::zeros(&cfg).unwrap();
        w.params.cls_token = Tensor::from_fn([1, 8], |i| i as f64);
        let x = patch_embed(&Tensor::zeros([2, 8, 8]), &w).unwrap();
        assert_eq!(x.row(0), w.params.cls_token.data());
        assert!(x.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_count() {
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 2,
            in_chans: 1,
            embed_dim: 2,
            num_heads: 1,
            num_layers: 1,
            mlp_ratio: 1,
            num_classes: 2,
        };
        let w = ViTWeights::<f64>::init(&cfg, 0).unwrap();
        assert_eq!(patch_embed(&Tensor::zeros([1, 4, 4]), &w).unwrap().shape(), &[5, 2]);
    }

    #[test]
    fn patch_embed_matches_unfold_oracle() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 1).unwrap();
        let img = image(&cfg, 2);
        let x = patch_embed(&img, &w).unwrap();
        let (p, g) = (cfg.patch_size, cfg.grid());
        for gy in 0..g {
            for gx in 0..g {
                let mut flat = Vec::new();
                for c in 0..cfg.in_chans {
                    for dy in 0..p {
                        for dx in 0..p {
                            flat.push(img.data()[(c * 8 + gy * p + dy) * 8 + gx * p + dx]);
                        }
                    }
                }
                let i = gy * g + gx;
                for j in 0..cfg.embed_dim {
                    let mut v = w.params.patch_b.data()[j] + w.params.pos_embed.at2(i + 1, j);
                    for (k, f) in flat.iter().enumerate() {
                        v += f * w.params.patch_w.at2(k, j);
                    }
                    assert!((x.at2(i + 1, j) - v).abs() < 1e-12);
                }
            }
        }
        assert!(patch_embed(&Tensor::zeros([2, 4, 4]), &w).is_err());
    }

    #[test]
    fn uniform_attention_averages_values() {
        let d = 2;
        let mut b = random_block(d, 2, 0);
        b.qkv_w = Tensor::zeros([d, 3 * d]);
        for i in 0..d {
            b.qkv_w.data_mut()[i * 3 * d + 2 * d + i] = 1.0;
        }
        b.qkv_b = Tensor::zeros([3 * d]);
        b.proj_w = Tensor::eye(d);
        b.proj_b = Tensor::zeros([d]);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -1.0], &[2.0, 5.0]]);
        let (out, inter) = mhsa_forward(&x, &b, 1, None).unwrap();
        for r in 0..3 {
            assert!((out.at2(r, 0) - 2.0).abs() < 1e-12);
            assert!((out.at2(r, 1) - 2.0).abs() < 1e-12);
        }
        assert!((inter.cls_attn.data()[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_mask_is_bitwise_noop() {
        let b = random_block(8, 16, 3);
        let x = Tensor::from_fn([5, 8], |i| (i as f64 * 0.37).sin());
        let plain = mhsa_forward(&x, &b, 2, None).unwrap();
        let masked = mhsa_forward(&x, &b, 2, Some(&[1.0; 4])).unwrap();
        assert_eq!(plain, masked);
    }

    #[test]
    fn mhsa_matches_per_head_loop_oracle() {
        let d = 4;
        let heads = 2;
        let dh = 2;
        let b = random_block(d, 8, 5);
        let x = Tensor::from_fn([3, d], |i| (i as f64 * 0.61).cos());
        let (out, inter) = mhsa_forward(&x, &b, heads, None).unwrap();
        let qkv = x.linear(&b.qkv_w, &b.qkv_b).unwrap();
        let mut concat = vec![0.0; 3 * d];
        for h in 0..heads {
            for i in 0..3 {
                let mut logits = [0.0; 3];
                for (j, l) in logits.iter_mut().enumerate() {
                    for e in 0..dh {
                        *l += qkv.at2(i, h * dh + e) * qkv.at2(j, d + h * dh + e);
                    }
                    *l /= (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let p: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
                if i == 0 {
                    assert!((inter.cls_attn.at2(h, 0) - p[1]).abs() < 1e-12);
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
                for e in 0..dh {
                    let v: f64 = (0..3).map(|j| p[j] * qkv.at2(j, 2 * d + h * dh + e)).sum();
                    concat[i * d + h * dh + e] = v;
                    assert!((inter.ctx_per_head.data()[(h * 3 + i) * dh + e] - v).abs() < 1e-12);
                }
            }
        }
        let oracle = Tensor::new([3, d], concat).unwrap().linear(&b.proj_w, &b.proj_b).unwrap();
        assert!(out.max_abs_diff(&oracle) < 1e-5);
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = small();
        let w = ViTWeights::<f64>::zeros(&cfg).unwrap();
        let x = Tensor::from_fn([5, 8], |i| i as f64 * 0.1);
        let (y, _) = block_forward(&x, &w.params.blocks[0], 2, None, MaskStrategy::Attention).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_ffn_leaves_attention_residual() {
        let mut b = random_block(8, 16, 9);
        b.fc2_w = Tensor::zeros([16, 8]);
        b.fc2_b = Tensor::zeros([8]);
        let x = Tensor::from_fn([5, 8], |i| (i as f64).sin());
        let (y, _) = block_forward(&x, &b, 2, None, MaskStrategy::Attention).unwrap();
        let h = x.layernorm(&b.norm1_g, &b.norm1_b, LN_EPS).unwrap();
        let expected = x.add(&mhsa_forward(&h, &b, 2, None).unwrap().0).unwrap();
        assert_eq!(y, expected);
    }

    #[test]
    fn block_matches_composition_oracle() {
        let b = random_block(8, 16, 13);
        let x = Tensor::from_fn([6, 8], |i| (i as f64 * 1.3).sin());
        let (y, _) = block_forward(&x, &b, 2, None, MaskStrategy::Attention).unwrap();
        let h = x.layernorm(&b.norm1_g, &b.norm1_b, LN_EPS).unwrap();
        let x1 = x.add(&mhsa_forward(&h, &b, 2, None).unwrap().0).unwrap();
        let h2 = x1.layernorm(&b.norm2_g, &b.norm2_b, LN_EPS).unwrap();
        // explicit-loop MLP
        let mut f = Tensor::zeros([6, 8]);
        for r in 0..6 {
            let hid: Vec<f64> = (0..16)
                .map(|j| gelu(b.fc1_b.data()[j] + (0..8).map(|k| h2.at2(r, k) * b.fc1_w.at2(k, j)).sum::<f64>()))
                .collect();
            for c in 0..8 {
                f.row_mut(r)[c] = b.fc2_b.data()[c] + (0..16).map(|j| hid[j] * b.fc2_w.at2(j, c)).sum::<f64>();
            }
        }
        assert!(y.max_abs_diff(&x1.add(&f).unwrap()) < 1e-10);
    }

    #[test]
    fn keep_all_thresholds_match_dense() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 4).unwrap();
        let img = image(&cfg, 5);
        let (dense, trace) = forward(&img, &w, None).unwrap();
        assert!(trace.stages.is_empty());
        let policy = PrunePolicy::from_config(&PruneConfig {
            locations: vec![1, 3],
            thresholds: vec![-1.0, -1.0],
            ..PruneConfig::default()
        });
        let (pruned, trace) = forward(&img, &w, Some(&policy)).unwrap();
        assert!(pruned.max_abs_diff(&dense) < 1e-5);
        assert_eq!(trace.kept_counts(), vec![16, 16]);
    }

    #[test]
    fn gathered_equals_masked() {
        let cfg = small();
        for seed in 0..10 {
            let w = ViTWeights::<f64>::init(&cfg, seed).unwrap();
            let img = image(&cfg, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets = vec![
                (0..16).filter(|_| rng.gen_bool(0.6)).collect::<Vec<_>>(),
                (0..16).filter(|_| rng.gen_bool(0.6)).collect(),
            ];
            let policy = PrunePolicy::from_config(&PruneConfig {
                locations: vec![1, 3],
                thresholds: vec![0.0, 0.0],
                ..PruneConfig::default()
            })
            .with_selector(Selector::Explicit(sets));
            let (g, gt) = forward(&img, &w, Some(&policy)).unwrap();
            let (m, mt) = forward_masked(&img, &w, Some(&policy), MaskStrategy::Attention).unwrap();
            assert!(g.max_abs_diff(&m) < 1e-10, "seed {seed}");
            assert_eq!(gt.kept_counts(), mt.kept_counts());
            assert!(gt.stages[0].scores.token_scores.max_abs_diff(&mt.stages[0].scores.token_scores) < 1e-12);
        }
    }

    #[test]
    fn batch_of_one_matches_single_and_batch_k_equalizes() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 8).unwrap();
        let imgs: Vec<_> = (0..3).map(|s| image(&cfg, s)).collect();
        let policy = PrunePolicy::from_config(&PruneConfig {
            locations: vec![2],
            thresholds: vec![0.06],
            ..PruneConfig::default()
        });
        let one = forward_batch(&imgs[..1], &w, Some(&policy), Realization::Gather, BatchRule::BatchK).unwrap();
        let (single, trace) = forward(&imgs[0], &w, Some(&policy)).unwrap();
        assert_eq!(one.logits.data(), single.data());
        assert_eq!(one.traces[0], trace);
        let many = forward_batch(&imgs, &w, Some(&policy), Realization::Gather, BatchRule::BatchK).unwrap();
        let counts: Vec<usize> = many.traces.iter().map(|t| t.kept_counts()[0]).collect();
        assert!(counts.windows(2).all(|c| c[0] == c[1]));
        let per = forward_batch(&imgs, &w, Some(&policy), Realization::Gather, BatchRule::PerImage).unwrap();
        let own: usize = per.traces.iter().map(|t| t.kept_counts()[0]).sum();
        assert_eq!(counts[0], (own / 3).max(1));
    }

    #[test]
    fn everything_pruned_keeps_top_token() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 2).unwrap();
        let policy = PrunePolicy::from_config(&PruneConfig {
            locations: vec![2],
            thresholds: vec![10.0],
            ..PruneConfig::default()
        });
        let (logits, trace) = forward(&image(&cfg, 1), &w, Some(&policy)).unwrap();
        assert!(logits.all_finite());
        assert!(trace.any_forced());
        assert_eq!(trace.kept_counts(), vec![1]);
    }

    #[test]
    fn activation_strategy_differs_from_attention() {
        let cfg = small();
        let w = ViTWeights::<f64>::init(&cfg, 3).unwrap();
        let img = image(&cfg, 3);
        let policy = PrunePolicy::from_config(&PruneConfig {
            locations: vec![1],
            thresholds: vec![0.0],
            ..PruneConfig::default()
        })
        .with_selector(Selector::Explicit(vec![vec![0, 1, 2]]));
        let (a, _) = forward_masked(&img, &w, Some(&policy), MaskStrategy::Attention).unwrap();
        let (b, _) = forward_masked(&img, &w, Some(&policy), MaskStrategy::Activation).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn deterministic_logits() {
        let cfg = small();
        let w = ViTWeights::<f32>::init(&cfg, 6).unwrap();
        let img: Tensor<f32> = image(&cfg, 6).cast();
        let policy = PrunePolicy::from_config(&PruneConfig {
            locations: vec![2],
            thresholds: vec![0.05],
            ..PruneConfig::default()
        });
        let a = forward(&img, &w, Some(&policy)).unwrap();
        let b = forward(&img, &w, Some(&policy)).unwrap();
        assert_eq!(a, b);
    }
}
