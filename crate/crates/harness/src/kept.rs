use std::io::Write;

use anyhow::{ensure, Result};

use crate::run::mean_std;

/// Per-stage histograms of kept image-token counts over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct KeptDistribution {
    pub num_patches: usize,
    /// `histograms[stage][count]` images keeping `count` tokens.
    pub histograms: Vec<Vec<usize>>,
}

impl KeptDistribution {
    /// `kept[image][stage]` token counts.
    pub fn from_counts(kept: &[Vec<usize>], stages: usize, num_patches: usize) -> Result<Self> {
        let mut histograms = vec![vec![0; num_patches + 1]; stages];
        for (i, row) in kept.iter().enumerate() {
            ensure!(row.len() == stages, "image {i} has {} stages, expected {stages}", row.len());
            for (hist, &c) in histograms.iter_mut().zip(row) {
                ensure!(c <= num_patches, "image {i} keeps {c} of {num_patches} tokens");
                hist[c] += 1;
            }
        }
        Ok(Self { num_patches, histograms })
    }

    pub fn stages(&self) -> usize {
        self.histograms.len()
    }

    /// Images counted at `stage`.
    pub fn mass(&self, stage: usize) -> usize {
        self.histograms[stage].iter().sum()
    }

    fn values(&self, stage: usize) -> Vec<f64> {
        self.histograms[stage]
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c as f64, n))
            .collect()
    }

    pub fn mean(&self, stage: usize) -> f64 {
        mean_std(&self.values(stage)).0
    }

    /// Population standard deviation in tokens.
    pub fn stddev(&self, stage: usize) -> f64 {
        mean_std(&self.values(stage)).1
    }

    /// Count values that occur at all.
    pub fn occupied_bins(&self, stage: usize) -> usize {
        self.histograms[stage].iter().filter(|&&n| n > 0).count()
    }

    /// Share of the images sitting in the most common bin.
    pub fn modal_share(&self, stage: usize) -> f64 {
        let mass = self.mass(stage);
        if mass == 0 {
            return 0.0;
        }
        *self.histograms[stage].iter().max().unwrap_or(&0) as f64 / mass as f64
    }

    /// `stage,kept_tokens,images` with stages from 1 and empty bins omitted.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "stage,kept_tokens,images")?;
        for (s, hist) in self.histograms.iter().enumerate() {
            for (c, &n) in hist.iter().enumerate().filter(|(_, &n)| n > 0) {
                writeln!(w, "{},{c},{n}", s + 1)?;
            }
        }
        Ok(())
    }
}
