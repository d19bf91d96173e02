//! `asvit viz`: per-stage overlays of one image with pruned patches
//! darkened, a text grid of the same masks and the image's score dump.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use asvit_core::sparsity::PrunePolicy;
use asvit_core::vit::{forward, Checkpoint, ScoreTrace};
use asvit_core::Tensor;

use crate::netpbm::{encode_pgm, luma};
use crate::run::{ensure_dir, write_text};

pub const GRID_FILE: &str = "masks.txt";
pub const SCORES_FILE: &str = "scores.csv";
pub const INPUT_FILE: &str = "input.pgm";

/// Brightness kept by a pruned patch.
const DARKEN: f32 = 0.25;

#[derive(Clone, Debug)]
pub struct VizOutput {
    /// Row-major keep flags over the patch grid after each stage.
    pub grids: Vec<Vec<u8>>,
    pub trace: ScoreTrace<f32>,
}

/// `dense` keeps every token at every stage of the checkpoint's schedule.
pub fn cmd_viz(ckpt: &Checkpoint<f32>, image: &Tensor<f32>, out: &Path, scale: usize, dense: bool) -> Result<VizOutput> {
    let cfg = &ckpt.weights.config;
    ensure!(
        image.shape() == [cfg.in_chans, cfg.image_size, cfg.image_size],
        "image shape {:?} does not fit a {}x{} model",
        image.shape(),
        cfg.image_size,
        cfg.image_size
    );
    let mut pc = ckpt.prune.clone().context("viz needs a checkpoint with a pruning schedule")?;
    if dense {
        // scores are nonnegative, so every token clears a negative threshold
        pc.thresholds = vec![-1.0; pc.num_stages()];
    }
    let (_, trace) = forward(image, &ckpt.weights, Some(&PrunePolicy::from_config(&pc)))?;

    let (side, grid, patch) = (cfg.image_size, cfg.grid(), cfg.patch_size);
    let n = cfg.num_patches();
    let base = luma(image)?;
    ensure_dir(out)?;
    std::fs::write(out.join(INPUT_FILE), encode_pgm(&base, side, side, scale))?;
    let mut text = String::new();
    let mut grids = Vec::with_capacity(pc.num_stages());
    for (s, st) in trace.stages.iter().enumerate() {
        let keep = trace.keep_grid(s, n);
        let shaded: Vec<f32> = base
            .iter()
            .enumerate()
            .map(|(p, &v)| {
                let (y, x) = (p / side, p % side);
                if keep[(y / patch) * grid + x / patch] == 1 {
                    v
                } else {
                    v * DARKEN
                }
            })
            .collect();
        std::fs::write(out.join(format!("stage_{}.pgm", s + 1)), encode_pgm(&shaded, side, side, scale))?;
        writeln!(text, "stage {} after block {}: {} of {n} tokens kept", s + 1, st.layer, st.kept.len())?;
        for row in keep.chunks(grid) {
            text.extend(row.iter().map(|&k| if k == 1 { '#' } else { '.' }));
            text.push('\n');
        }
        text.push('\n');
        grids.push(keep);
    }
    write_text(&out.join(GRID_FILE), &text)?;
    let mut scores = Vec::new();
    trace.report().write_csv(&mut scores, true)?;
    std::fs::write(out.join(SCORES_FILE), scores)?;
    Ok(VizOutput { grids, trace })
}
