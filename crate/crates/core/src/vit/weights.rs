use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Parameters of one transformer block. `P` is whatever is stored per
/// parameter: a tensor, a tape handle, a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub norm1_g: P,
    pub norm1_b: P,
    pub qkv_w: P,
    pub qkv_b: P,
    pub proj_w: P,
    pub proj_b: P,
    pub norm2_g: P,
    pub norm2_b: P,
    pub fc1_w: P,
    pub fc1_b: P,
    pub fc2_w: P,
    pub fc2_b: P,
}

/// All model parameters, in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub cls_token: P,
    pub pos_embed: P,
    pub blocks: Vec<BlockParams<P>>,
    pub norm_g: P,
    pub norm_b: P,
    pub head_w: P,
    pub head_b: P,
}

impl<P> BlockParams<P> {
    fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<BlockParams<Q>, E> {
        let mut g = |name: &str, p: &P| f(&format!("{prefix}.{name}"), p);
        Ok(BlockParams {
            norm1_g: g("norm1.weight", &self.norm1_g)?,
            norm1_b: g("norm1.bias", &self.norm1_b)?,
            qkv_w: g("attn.qkv.weight", &self.qkv_w)?,
            qkv_b: g("attn.qkv.bias", &self.qkv_b)?,
            proj_w: g("attn.proj.weight", &self.proj_w)?,
            proj_b: g("attn.proj.bias", &self.proj_b)?,
            norm2_g: g("norm2.weight", &self.norm2_g)?,
            norm2_b: g("norm2.bias", &self.norm2_b)?,
            fc1_w: g("mlp.fc1.weight", &self.fc1_w)?,
            fc1_b: g("mlp.fc1.bias", &self.fc1_b)?,
            fc2_w: g("mlp.fc2.weight", &self.fc2_w)?,
            fc2_b: g("mlp.fc2.bias", &self.fc2_b)?,
        })
    }

    fn refs(&self) -> [&P; 12] {
        [
            &self.norm1_g,
            &self.norm1_b,
            &self.qkv_w,
            &self.qkv_b,
            &self.proj_w,
            &self.proj_b,
            &self.norm2_g,
            &self.norm2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    fn refs_mut(&mut self) -> [&mut P; 12] {
        [
            &mut self.norm1_g,
            &mut self.norm1_b,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.norm2_g,
            &mut self.norm2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

impl<P> ViTParams<P> {
    /// Applies `f` to every parameter with its canonical name.
    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&str, &P) -> Result<Q, E>) -> Result<ViTParams<Q>, E> {
        Ok(ViTParams {
            patch_w: f("patch_embed.weight", &self.patch_w)?,
            patch_b: f("patch_embed.bias", &self.patch_b)?,
            cls_token: f("cls_token", &self.cls_token)?,
            pos_embed: f("pos_embed", &self.pos_embed)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}"), &mut f))
                .collect::<Result<_, E>>()?,
            norm_g: f("norm.weight", &self.norm_g)?,
            norm_b: f("norm.bias", &self.norm_b)?,
            head_w: f("head.weight", &self.head_w)?,
            head_b: f("head.bias", &self.head_b)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ViTParams<Q> {
        self.try_map(|n, p| Ok::<_, std::convert::Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    /// Parameters in canonical order.
    pub fn refs(&self) -> Vec<&P> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            out.extend(b.refs());
        }
        out.extend([&self.norm_g, &self.norm_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn refs_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend(b.refs_mut());
        }
        out.extend([
            &mut self.norm_g,
            &mut self.norm_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Canonical parameter names, aligned with [`refs`](Self::refs).
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        names
    }
}

impl ViTParams<Vec<usize>> {
    /// Expected shape of every parameter for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let block = BlockParams {
            norm1_g: vec![d],
            norm1_b: vec![d],
            qkv_w: vec![d, 3 * d],
            qkv_b: vec![3 * d],
            proj_w: vec![d, d],
            proj_b: vec![d],
            norm2_g: vec![d],
            norm2_b: vec![d],
            fc1_w: vec![d, hidden],
            fc1_b: vec![hidden],
            fc2_w: vec![hidden, d],
            fc2_b: vec![d],
        };
        ViTParams {
            patch_w: vec![cfg.patch_dim(), d],
            patch_b: vec![d],
            cls_token: vec![1, d],
            pos_embed: vec![cfg.num_tokens(), d],
            blocks: vec![block; cfg.num_layers],
            norm_g: vec![d],
            norm_b: vec![d],
            head_w: vec![d, cfg.num_classes],
            head_b: vec![cfg.num_classes],
        }
    }
}

/// Model configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTWeights<T> {
    pub config: ModelConfig,
    pub params: ViTParams<Tensor<T>>,
}

impl<T: Scalar> ViTWeights<T> {
    /// Random initialization: Xavier-uniform projections, N(0, 0.02)
    /// class token and positions, unit norms, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ViTParams::shapes(config).map(|name, shape| {
            let shape = shape.clone();
            if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
                Tensor::full(shape, T::one())
            } else if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else if name == "cls_token" || name == "pos_embed" {
                Tensor::from_fn(shape, |_| lit(0.02 * standard_normal(&mut rng)))
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(shape, |_| lit(rng.gen_range(-bound..bound)))
            }
        });
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// All-zero parameters (norm scales included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            params: ViTParams::shapes(config).map(|_, s| Tensor::zeros(s.clone())),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ViTWeights<U> {
        ViTWeights {
            config: self.config.clone(),
            params: self.params.map(|_, t| t.cast()),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.refs().iter().map(|t| t.len()).sum()
    }
}

/// Box-Muller sample from N(0, 1).
pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
