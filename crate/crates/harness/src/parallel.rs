//! Inference over a whole dataset, optionally sharded across a thread pool.
//!
//! Shards follow the same chunk boundaries as the sequential loop and every
//! worker reads the same immutable weights, so results do not depend on
//! the thread count.

use anyhow::Result;
use asvit_core::sparsity::PrunePolicy;
use asvit_core::vit::{forward_batch, BatchRule, Realization, ScoreTrace, ViTWeights};
use asvit_core::Tensor;
use rayon::prelude::*;

/// Logits and trace of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub logits: Vec<f32>,
    pub trace: ScoreTrace<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct InferSettings<'a> {
    pub policy: Option<&'a PrunePolicy>,
    pub realization: Realization,
    pub rule: BatchRule,
    pub chunk: usize,
    /// 1 runs on the calling thread.
    pub threads: usize,
}

pub fn infer_all(w: &ViTWeights<f32>, images: &[Tensor<f32>], s: InferSettings<'_>) -> Result<Vec<ImageResult>> {
    let run = |imgs: &[Tensor<f32>]| -> Result<Vec<ImageResult>> {
        let inf = forward_batch(imgs, w, s.policy, s.realization, s.rule)?;
        Ok(inf
            .traces
            .into_iter()
            .enumerate()
            .map(|(r, trace)| ImageResult {
                logits: inf.logits.row(r).to_vec(),
                trace,
            })
            .collect())
    };
    let chunk = s.chunk.max(1);
    let shards: Vec<Vec<ImageResult>> = if s.threads <= 1 {
        images.chunks(chunk).map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(s.threads).build()?;
        pool.install(|| images.par_chunks(chunk).map(run).collect::<Result<_>>())?
    };
    Ok(shards.into_iter().flatten().collect())
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}
