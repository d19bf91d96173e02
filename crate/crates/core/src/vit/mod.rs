//! DeiT-style vision transformer with attention intermediates exposed.

mod checkpoint;
mod forward;
mod tape_forward;
mod weights;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, MAGIC, VERSION};
pub use forward::{
    block_forward, extract_patches, ffn_forward, forward, forward_batch, forward_masked, mhsa_forward, patch_embed,
    AttnIntermediates, BatchRule, Inference, Realization, ScoreTrace, StageTrace,
};
pub use tape_forward::{tape_forward, tape_params, MaskMode, StageMasking, TapeForward, TapeStage};
pub use weights::{BlockParams, ViTParams, ViTWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// Architecture shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny_as()
    }
}

impl ModelConfig {
    /// Desk-scale default: 32×32 input, 4×4 patches (64 tokens), D=64,
    /// 4 heads, 12 layers, 10 classes.
    pub fn tiny_as() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_chans: 3,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 12,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }

    /// DeiT-Small at 224×224.
    pub fn deit_s() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_chans: 3,
            embed_dim: 384,
            num_heads: 6,
            num_layers: 12,
            mlp_ratio: 4,
            num_classes: 1000,
        }
    }

    /// DeiT-Base at the given resolution (224 or 384).
    pub fn deit_b(image_size: usize) -> Self {
        Self {
            image_size,
            patch_size: 16,
            in_chans: 3,
            embed_dim: 768,
            num_heads: 12,
            num_layers: 12,
            mlp_ratio: 4,
            num_classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embed_dim must be a positive multiple of num_heads");
        }
        if self.in_chans == 0 || self.num_layers == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return bad("in_chans, num_layers, mlp_ratio and num_classes must be positive");
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens `N`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Image tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Length of a flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.in_chans * self.patch_size * self.patch_size
    }
}
