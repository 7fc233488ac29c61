//! Seeded structured inputs: a flat field with a textured patch.
//!
//! The fixture injects spatial conditioning into every stage input. Outside
//! the patch the conditioning is zero. Inside, tokens alternate in a
//! one-token checkerboard between a seeded direction and its negation,
//! drawn afresh for each stage, so the patch carries detail at every
//! resolution while its mean stays zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grid::{FeatureGrid, Grid, Mask};

/// Spatial conditioning for a stage: a `h x w x c` map added to the
/// backbone's embedded input tokens.
pub trait Conditioner {
    fn conditioning(&self, stage: usize, h: usize, w: usize) -> FeatureGrid;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatTextureFixture {
    pub seed: u64,
    pub channels: usize,
    /// Norm of the conditioning vector at textured tokens.
    pub amplitude: f64,
    /// Patch rectangle in fractional coordinates: `[top, left, bottom, right)`.
    pub patch: [f64; 4],
}

impl FlatTextureFixture {
    pub const DEFAULT_SEED: u64 = 2024;
    pub const DEFAULT_AMPLITUDE: f64 = 24.0;
    pub const DEFAULT_PATCH: [f64; 4] = [0.25, 0.3125, 0.75, 0.6875];

    pub fn new(channels: usize) -> Self {
        Self {
            seed: Self::DEFAULT_SEED,
            channels,
            amplitude: Self::DEFAULT_AMPLITUDE,
            patch: Self::DEFAULT_PATCH,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Positions whose cell center falls inside the patch.
    pub fn textured_region(&self, h: usize, w: usize) -> Mask {
        let [top, left, bottom, right] = self.patch;
        Mask::from_fn(h, w, |i, j| {
            let y = (i as f64 + 0.5) / h as f64;
            let x = (j as f64 + 0.5) / w as f64;
            y >= top && y < bottom && x >= left && x < right
        })
    }

    pub fn flat_region(&self, h: usize, w: usize) -> Mask {
        self.textured_region(h, w).not()
    }

    fn stage_colors(&self, stage: usize) -> [Vec<f64>; 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(stage as u64));
        let v: Vec<f64> = (0..self.channels)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let a: Vec<f64> = v.iter().map(|x| self.amplitude * x / n).collect();
        let b = a.iter().map(|x| -x).collect();
        [a, b]
    }
}

impl Conditioner for FlatTextureFixture {
    fn conditioning(&self, stage: usize, h: usize, w: usize) -> FeatureGrid {
        let region = self.textured_region(h, w);
        let colors = self.stage_colors(stage);
        Grid::from_fn(h, w, self.channels, |i, j| {
            if region.get(i, j) {
                colors[(i + j) % 2].clone()
            } else {
                vec![0.0; self.channels]
            }
        })
        .expect("finite conditioning")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_partition_the_grid() {
        let f = FlatTextureFixture::new(4);
        for &(h, w) in &[(1, 1), (8, 8), (16, 16), (32, 24)] {
            let t = f.textured_region(h, w);
            let fl = f.flat_region(h, w);
            assert_eq!(t.count() + fl.count(), h * w);
            assert!(t.and(&fl).count() == 0);
        }
        assert_eq!(f.textured_region(16, 16).count(), 8 * 6);
    }

    #[test]
    fn conditioning_zero_outside_patch() {
        let f = FlatTextureFixture::new(4);
        let cond = f.conditioning(3, 16, 16);
        let flat = f.flat_region(16, 16);
        for (i, j) in flat.positions() {
            assert!(cond.at(i, j).iter().all(|&v| v == 0.0));
        }
        for (i, j) in f.textured_region(16, 16).positions() {
            let n: f64 = cond.at(i, j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - f.amplitude).abs() < 1e-9);
        }
        assert_eq!(cond, f.conditioning(3, 16, 16));
        assert_ne!(cond, f.with_seed(1).conditioning(3, 16, 16));
    }
}
