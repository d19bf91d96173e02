//! Cost model in multiply-accumulates (MACs).
//!
//! One block over `n` tokens with width `D` and MLP ratio `r` costs
//!
//! ```text
//! qkv + output projections   4·n·D²
//! attention logits + context 2·n²·D
//! MLP                        2·r·n·D²
//! ```
//!
//! Patch embedding (`N·C·p²·D`) and the classifier (`D·classes`) are
//! counted once. Norms, softmax, GELU and bias additions are ignored. The
//! usual "GFLOPs" figures quoted for vision transformers are MAC counts in
//! exactly this sense.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::ModelConfig;

/// Cost of one block over `n` tokens.
pub fn layer_flops(n_tokens: f64, cfg: &ModelConfig) -> f64 {
    let d = cfg.embed_dim as f64;
    let r = cfg.mlp_ratio as f64;
    (4.0 + 2.0 * r) * n_tokens * d * d + 2.0 * n_tokens * n_tokens * d
}

/// Token-count-dependent cost of a model with pruning after the given
/// block counts.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsModel {
    pub config: ModelConfig,
    pub locations: Vec<usize>,
}

impl FlopsModel {
    pub fn new(config: &ModelConfig, locations: &[usize]) -> Result<Self> {
        if locations.windows(2).any(|w| w[0] >= w[1]) || locations.iter().any(|&l| l >= config.num_layers) {
            return Err(Error::Config(format!("bad pruning locations {locations:?}")));
        }
        Ok(Self {
            config: config.clone(),
            locations: locations.to_vec(),
        })
    }

    pub fn dense_tokens(&self) -> f64 {
        self.config.num_tokens() as f64
    }

    /// Cost that does not depend on token counts.
    pub fn fixed_flops(&self) -> f64 {
        let c = &self.config;
        (c.num_patches() * c.patch_dim() * c.embed_dim + c.embed_dim * c.num_classes) as f64
    }

    /// Blocks run at each token-count level: `blocks[0]` at full length,
    /// `blocks[s + 1]` after stage `s`.
    pub fn segment_lengths(&self) -> Vec<usize> {
        let mut bounds = vec![0];
        bounds.extend(&self.locations);
        bounds.push(self.config.num_layers);
        bounds.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn dense_total(&self) -> f64 {
        self.fixed_flops() + self.config.num_layers as f64 * layer_flops(self.dense_tokens(), &self.config)
    }

    /// Total cost given the token count (class token included) active
    /// after each stage.
    pub fn total_for_counts(&self, stage_counts: &[f64]) -> Result<f64> {
        if stage_counts.len() != self.locations.len() {
            return Err(Error::Contract(format!(
                "{} stage counts for {} stages",
                stage_counts.len(),
                self.locations.len()
            )));
        }
        let levels = std::iter::once(self.dense_tokens()).chain(stage_counts.iter().copied());
        Ok(self.fixed_flops()
            + levels
                .zip(self.segment_lengths())
                .map(|(n, k)| k as f64 * layer_flops(n, &self.config))
                .sum::<f64>())
    }

    pub fn fraction_for_counts(&self, stage_counts: &[f64]) -> Result<f64> {
        Ok(self.total_for_counts(stage_counts)? / self.dense_total())
    }

    /// Per-image cost from `[B, stages + 1]` counts whose first column is
    /// the dense token count and whose rows never increase.
    pub fn flops_of_batch<T: Scalar>(&self, stage_kept: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, s) = stage_kept.dims2()?;
        if s != self.locations.len() + 1 {
            return Err(Error::Contract(format!(
                "expected {} count columns, got {s}",
                self.locations.len() + 1
            )));
        }
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            let row: Vec<f64> = stage_kept.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            if row[0] != self.dense_tokens() {
                return Err(Error::Contract(format!(
                    "row {r} starts at {} tokens, expected {}",
                    row[0],
                    self.dense_tokens()
                )));
            }
            if row.windows(2).any(|w| w[1].is_nan() || w[1] > w[0]) {
                return Err(Error::Contract(format!("row {r} token counts increase: {row:?}")));
            }
            out.push(lit(self.total_for_counts(&row[1..])?));
        }
        Ok(Tensor::vector(out))
    }

    /// Differentiable cost fraction from scalar count variables.
    pub fn tape_fraction<T: Scalar>(&self, tape: &mut Tape<T>, counts: &[Var]) -> Result<Var> {
        if counts.len() != self.locations.len() {
            return Err(Error::Contract(format!(
                "{} stage counts for {} stages",
                counts.len(),
                self.locations.len()
            )));
        }
        let d = self.config.embed_dim as f64;
        let lin = (4.0 + 2.0 * self.config.mlp_ratio as f64) * d * d;
        let quad = 2.0 * d;
        let dense = self.dense_total();
        let segs = self.segment_lengths();
        let fixed = self.fixed_flops() + segs[0] as f64 * layer_flops(self.dense_tokens(), &self.config);
        let mut acc: Option<Var> = None;
        for (&c, &k) in counts.iter().zip(&segs[1..]) {
            let sq = tape.mul(c, c)?;
            let a = tape.scale(c, lit(k as f64 * lin / dense));
            let b = tape.scale(sq, lit(k as f64 * quad / dense));
            let term = tape.add(a, b)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, term)?,
                None => term,
            });
        }
        let base: T = lit(fixed / dense);
        Ok(match acc {
            Some(v) => tape.add_scalar(v, base),
            None => tape.constant(Tensor::vector(vec![base])),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use proptest::prelude::*;

    #[test]
    fn zero_tokens_cost_nothing() {
        assert_eq!(layer_flops(0.0, &ModelConfig::tiny_as()), 0.0);
    }

    #[test]
    fn deit_small_and_base_224() {
        let s = FlopsModel::new(&ModelConfig::deit_s(), &[]).unwrap().dense_total() / 1e9;
        assert!((s / 4.6 - 1.0).abs() < 0.05, "{s}");
        let b = FlopsModel::new(&ModelConfig::deit_b(224), &[]).unwrap().dense_total() / 1e9;
        assert!((b / 17.5 - 1.0).abs() < 0.05, "{b}");
    }

    #[test]
    fn dense_counts_reproduce_closed_form() {
        let m = FlopsModel::new(&ModelConfig::tiny_as(), &[4, 7, 10]).unwrap();
        assert_eq!(m.total_for_counts(&[65.0; 3]).unwrap(), m.dense_total());
        let batch = m.flops_of_batch(&Tensor::full([2, 4], 65.0f64)).unwrap();
        assert_eq!(batch.data(), &[m.dense_total(); 2]);
    }

    #[test]
    fn piecewise_oracle_at_keep_rate_07() {
        let cfg = ModelConfig::tiny_as();
        let m = FlopsModel::new(&cfg, &[4, 7, 10]).unwrap();
        let img = [64.0 * 0.7, 64.0 * 0.49, 64.0 * 0.343];
        let counts: Vec<f64> = img.iter().map(|c| c + 1.0).collect();
        let mut per_layer = Vec::new();
        for l in 0..12 {
            let n = match l {
                0..=3 => 65.0,
                4..=6 => counts[0],
                7..=9 => counts[1],
                _ => counts[2],
            };
            per_layer.push(12.0 * n * 64.0 * 64.0 + 2.0 * n * n * 64.0);
        }
        let oracle = per_layer.iter().sum::<f64>() + 64.0 * 48.0 * 64.0 + 64.0 * 10.0;
        assert!((m.total_for_counts(&counts).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn contract_errors() {
        let m = FlopsModel::new(&ModelConfig::tiny_as(), &[4, 7, 10]).unwrap();
        let rising = Tensor::new([1, 4], vec![65.0, 30.0, 40.0, 10.0]).unwrap();
        assert!(m.flops_of_batch(&rising).is_err());
        let wrong_start = Tensor::new([1, 4], vec![60.0, 30.0, 20.0, 10.0]).unwrap();
        assert!(m.flops_of_batch(&wrong_start).is_err());
        assert!(FlopsModel::new(&ModelConfig::tiny_as(), &[7, 4]).is_err());
    }

    #[test]
    fn tape_fraction_matches_and_differentiates() {
        let m = FlopsModel::new(&ModelConfig::tiny_as(), &[4, 7, 10]).unwrap();
        let counts = [40.5, 22.25, 9.0];
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = counts.iter().map(|&c| tape.constant(Tensor::vector(vec![c]))).collect();
        let f = m.tape_fraction(&mut tape, &vars).unwrap();
        assert!((tape.value(f).data()[0] - m.fraction_for_counts(&counts).unwrap()).abs() < 1e-12);
        let err = finite_diff_check(
            |tape, x| {
                let v: Vec<Var> = (0..3)
                    .map(|i| {
                        let s = tape.reshape(x, &[1, 3])?;
                        let s = tape.slice(s, 0..1, i..i + 1)?;
                        tape.reshape(s, &[1])
                    })
                    .collect::<Result<_>>()?;
                let f = m.tape_fraction(tape, &v)?;
                Ok(tape.sum(f))
            },
            &Tensor::vector(counts.to_vec()),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    proptest! {
        #[test]
        fn cost_is_monotone(a in 1.0f64..65.0, b in 1.0f64..65.0, bump in 0.0f64..10.0, which in 0usize..2) {
            let m = FlopsModel::new(&ModelConfig::tiny_as(), &[4, 8]).unwrap();
            let base = [a, b];
            let mut more = base;
            more[which] += bump;
            prop_assert!(m.total_for_counts(&more).unwrap() >= m.total_for_counts(&base).unwrap());
        }
    }
}
