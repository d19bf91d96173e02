//! Small 10-class image sets.
//!
//! [`Dataset::synthetic`] draws seeded scenes holding one colored object
//! whose color (5 choices) and outline (disc or ring) give the class.
//! Position and size are random, and gray distractor blobs and pixel noise
//! fill the background. Object size varies enough that the number of
//! informative patches differs a lot between images.
//!
//! [`Dataset::load_cifar10`] reads the CIFAR-10 binary batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

const COLORS: [[f32; 3]; 5] = [
    [1.0, -0.6, -0.6],
    [-0.6, 1.0, -0.6],
    [-0.6, -0.6, 1.0],
    [1.0, 1.0, -0.6],
    [-0.6, 1.0, 1.0],
];

/// Images `[3, S, S]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `count` seeded synthetic scenes of side `size` (at least 16).
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        if size < 16 {
            return Err(Error::Data(format!("synthetic images need side >= 16, got {size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % NUM_CLASSES;
            images.push(scene(&mut rng, size, label));
            labels.push(label);
        }
        // interleave classes without a fixed period
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            images: order.iter().map(|&i| images[i].clone()).collect(),
            labels: order.iter().map(|&i| labels[i]).collect(),
        })
    }

    /// Reads CIFAR-10 binary records (`1` label byte, then 3072 bytes of
    /// R, G, B planes) and normalizes channels with the usual mean and
    /// deviation. At most `limit` records are kept.
    pub fn load_cifar10(files: &[impl AsRef<Path>], limit: usize) -> Result<Self> {
        const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
        const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
        const RECORD: usize = 1 + 3 * 32 * 32;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            let bytes = std::fs::read(f.as_ref())?;
            if bytes.len() % RECORD != 0 {
                return Err(Error::Data(format!(
                    "{}: size {} is not a multiple of {RECORD}",
                    f.as_ref().display(),
                    bytes.len()
                )));
            }
            for rec in bytes.chunks_exact(RECORD) {
                if labels.len() == limit {
                    break;
                }
                let label = rec[0] as usize;
                if label >= NUM_CLASSES {
                    return Err(Error::Data(format!("label {label} out of range")));
                }
                let data = rec[1..]
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| {
                        let c = i / 1024;
                        (b as f32 / 255.0 - MEAN[c]) / STD[c]
                    })
                    .collect();
                images.push(Tensor::new([3, 32, 32], data)?);
                labels.push(label);
            }
        }
        Ok(Self { images, labels })
    }

    /// Epoch order: a permutation seeded by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Subset by index.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn scene(rng: &mut ChaCha8Rng, size: usize, label: usize) -> Tensor<f32> {
    let plane = size * size;
    let mut img = vec![0f32; 3 * plane];
    for v in img.iter_mut() {
        *v = rng.gen_range(-0.25..0.25);
    }
    let s = size as f32;
    // gray distractors
    for _ in 0..rng.gen_range(1..=3) {
        let r = rng.gen_range(0.06 * s..0.12 * s);
        let cx = rng.gen_range(r..s - r);
        let cy = rng.gen_range(r..s - r);
        let level = if rng.gen_bool(0.5) { 0.7 } else { -0.7 };
        paint_disc(&mut img, size, cx, cy, r, level);
    }
    let color = COLORS[label / 2];
    let r = rng.gen_range(0.12 * s..0.3 * s);
    let cx = rng.gen_range(r..s - r);
    let cy = rng.gen_range(r..s - r);
    let inner = if label % 2 == 1 { 0.55 * r } else { 0.0 };
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let d = (x as f32 + 0.5 - cx).hypot(y as f32 + 0.5 - cy);
            if d < r && d >= inner {
                for (c, &val) in color.iter().enumerate() {
                    img[c * plane + y * size + x] = val;
                }
            }
        }
    }
    Tensor::new([3, size, size], img).expect("scene shape")
}

fn paint_disc(img: &mut [f32], size: usize, cx: f32, cy: f32, r: f32, level: f32) {
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            if dx * dx + dy * dy < r * r {
                for c in 0..3 {
                    img[c * plane + y * size + x] = level;
                }
            }
        }
    }
}
