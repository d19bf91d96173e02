//! Token importance from attention intermediates.
//!
//! For one layer with `H` heads and image tokens `i`:
//!
//! * head importance `imp[h, i] = ‖ctx[h, i]‖₂`, the norm of the token's
//!   per-head context vector before head concatenation;
//! * head weights `R[h, i] = imp[h, i] / Σ_h imp[h, i]`, uniform `1/H` when
//!   the column is all zero;
//! * token score `S[i] = Σ_h R[h, i] · A[h, i]` where `A` is the class-token
//!   attention row over image tokens.
//!
//! [`vanilla_score`] is the plain head mean of `A`, which is what `S`
//! reduces to under uniform weights.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{normalize_columns, Tape, Var};
use crate::tensor::Tensor;
use crate::vit::AttnIntermediates;

/// Which token score drives pruning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Head-importance weighted class attention.
    #[default]
    HeadWeighted,
    /// Mean class attention over heads.
    Vanilla,
}

/// `[H, n, Dh] -> [H, n]` row norms.
pub fn head_importance<T: Scalar>(ctx_per_head: &Tensor<T>) -> Result<Tensor<T>> {
    if ctx_per_head.rank() != 3 {
        return shape_err("head_importance", ctx_per_head.shape(), &[0, 0, 0]);
    }
    Ok(ctx_per_head.l2norm_lastdim())
}

/// Normalizes importances over heads, column by column.
pub fn head_weights<T: Scalar>(imp: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n) = imp.dims2()?;
    Ok(normalize_columns(imp, h, n))
}

pub fn weighted_score<T: Scalar>(weights: &Tensor<T>, cls_attn: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n) = cls_attn.dims2()?;
    if weights.shape() != cls_attn.shape() {
        return shape_err("weighted_score", weights.shape(), cls_attn.shape());
    }
    let mut out = vec![T::zero(); n];
    for r in 0..h {
        for ((o, &w), &a) in out.iter_mut().zip(weights.row(r)).zip(cls_attn.row(r)) {
            *o += w * a;
        }
    }
    Ok(Tensor::vector(out))
}

pub fn vanilla_score<T: Scalar>(cls_attn: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n) = cls_attn.dims2()?;
    let inv = T::one() / lit(h as f64);
    let mut out = vec![T::zero(); n];
    for r in 0..h {
        out.iter_mut().zip(cls_attn.row(r)).for_each(|(o, &a)| *o += a);
    }
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(Tensor::vector(out))
}

/// Scores, weights and importances of one layer's image tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores<T> {
    pub head_importance: Tensor<T>,
    pub head_weights: Tensor<T>,
    pub token_scores: Tensor<T>,
}

/// Scores the image tokens of one layer. The class-token row of the
/// context is skipped so importances line up with `cls_attn` columns.
pub fn score_layer<T: Scalar>(inter: &AttnIntermediates<T>, kind: ScoreKind) -> Result<LayerScores<T>> {
    let full = head_importance(&inter.ctx_per_head)?;
    let (h, n) = full.dims2()?;
    let imp = full.slice_cols(1, n)?;
    let (ah, an) = inter.cls_attn.dims2()?;
    if (ah, an) != (h, n - 1) {
        return shape_err("score_layer", imp.shape(), inter.cls_attn.shape());
    }
    let weights = head_weights(&imp)?;
    let token_scores = match kind {
        ScoreKind::HeadWeighted => weighted_score(&weights, &inter.cls_attn)?,
        ScoreKind::Vanilla => vanilla_score(&inter.cls_attn)?,
    };
    Ok(LayerScores {
        head_importance: imp,
        head_weights: weights,
        token_scores,
    })
}

/// Differentiable token score. `ctx` holds one `[n, Dh]` context matrix per
/// head and `probs` one `[n, n]` attention matrix per head, class token
/// first. Returns a length `n − 1` score vector.
pub fn tape_token_scores<T: Scalar>(tape: &mut Tape<T>, ctx: &[Var], probs: &[Var], kind: ScoreKind) -> Result<Var> {
    let (n, _) = tape.value(probs[0]).dims2()?;
    let rows = probs
        .iter()
        .map(|&p| tape.slice(p, 0..1, 1..n))
        .collect::<Result<Vec<_>>>()?;
    let attn = tape.concat_rows(&rows)?;
    match kind {
        ScoreKind::Vanilla => {
            let s = tape.col_sum(attn)?;
            Ok(tape.scale(s, T::one() / lit(probs.len() as f64)))
        }
        ScoreKind::HeadWeighted => {
            let norms = ctx
                .iter()
                .map(|&c| tape.l2norm_rows(c))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat_rows(&norms)?;
            let imp = tape.slice(stacked, 0..ctx.len(), 1..n)?;
            let weights = tape.normalize_cols(imp)?;
            let prod = tape.mul(weights, attn)?;
            tape.col_sum(prod)
        }
    }
}

/// Per-stage scoring record for export.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport<T> {
    pub stage: usize,
    /// Original image-token index of every scored candidate.
    pub token_indices: Vec<usize>,
    pub scores: LayerScores<T>,
    pub kept: Vec<bool>,
}

/// Scores at every pruning stage of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport<T> {
    pub stages: Vec<StageReport<T>>,
}

impl<T: Scalar> ScoreReport<T> {
    /// CSV with header `stage,token_index,score,kept_flag`; stages are
    /// numbered from 1.
    pub fn write_csv(&self, w: &mut impl Write, header: bool) -> Result<()> {
        if header {
            writeln!(w, "stage,token_index,score,kept_flag")?;
        }
        for st in &self.stages {
            for ((&idx, &s), &k) in st
                .token_indices
                .iter()
                .zip(st.scores.token_scores.data())
                .zip(&st.kept)
            {
                writeln!(w, "{},{},{},{}", st.stage + 1, idx, s, u8::from(k))?;
            }
        }
        Ok(())
    }
}
