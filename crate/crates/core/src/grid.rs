//! Token grids and stage schedules.
//!
//! Every grid is row-major with channels innermost: the value for
//! `(row, col, channel)` lives at `(row * w + col) * c + channel`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// An `h x w` grid of `c`-dimensional vectors.
///
/// Used for accumulated feature maps, per-stage residuals, logits and
/// decoded images; the aliases below only document intent.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

/// Per-token feature vectors of width `C`.
pub type FeatureGrid = Grid;
/// Per-token logits over a vocabulary of size `V`.
pub type LogitsGrid = Grid;
/// Decoded RGB values in `[-1, 1]`, one pixel per token.
pub type ImageGrid = Grid;

impl Grid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return invalid_arg(format!(
                "grid data has {} values, expected {}x{}x{}",
                data.len(),
                h,
                w,
                c
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return invalid_arg(format!("non-finite grid value at index {bad}"));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    /// Builds a grid from a per-position function returning `c` values.
    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                let v = f(i, j);
                if v.len() != c {
                    return invalid_arg(format!(
                        "position ({i}, {j}) produced {} channels, expected {c}",
                        v.len()
                    ));
                }
                data.extend(v);
            }
        }
        Self::new(h, w, c, data)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.w + j) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.w + j) * self.c;
        &mut self.data[o..o + self.c]
    }

    /// Extracts channel `ch` as a scalar grid.
    pub fn channel(&self, ch: usize) -> ScalarGrid {
        let data = self.data.iter().skip(ch).step_by(self.c).copied().collect();
        ScalarGrid {
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }
}

/// An `h x w` grid of scalars (MSE change maps, similarity maps, l1 maps).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return invalid_arg(format!("scalar grid has {} values, expected {h}x{w}", data.len()));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return invalid_arg(format!("non-finite grid value at index {bad}"));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Self::new(h, w, data)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.w + j] = v;
    }

    /// Largest value, or `0.0` for an empty grid.
    pub fn max(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, factor: f64) -> ScalarGrid {
        ScalarGrid {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Lifts to a one-channel [`Grid`].
    pub fn to_grid(&self) -> Grid {
        Grid {
            h: self.h,
            w: self.w,
            c: 1,
            data: self.data.clone(),
        }
    }

    /// Mean over the positions selected by `region`.
    pub fn masked_mean(&self, region: &Mask) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .zip(region.bits())
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// An `h x w` boolean grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Self {
            h,
            w,
            bits: vec![value; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                bits.push(f(i, j));
            }
        }
        Self { h, w, bits }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.w + j] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    pub fn not(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// Row-major positions of set bits.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let w = self.w;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(idx, _)| (idx / w, idx % w))
            .collect()
    }

    /// Upsamples with the nearest-parent rule: position `(i, j)` of the
    /// `h x w` target copies parent `(i * h_src / h, j * w_src / w)`.
    pub fn upsample_nearest(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |i, j| {
            let (pi, pj) = nearest_parent((i, j), (h, w), (self.h, self.w));
            self.get(pi, pj)
        })
    }
}

/// Parent index of `pos` in a `parent`-sized grid when a `child`-sized grid
/// was derived from it by upsampling.
pub fn nearest_parent(pos: (usize, usize), child: (usize, usize), parent: (usize, usize)) -> (usize, usize) {
    (pos.0 * parent.0 / child.0, pos.1 * parent.1 / child.1)
}

/// Per-stage token resolutions plus the stage from which exclusion starts.
///
/// Stages are 1-based: `resolution(1)` is the coarsest map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    resolutions: Vec<(usize, usize)>,
    start_stage: usize,
}

impl StageSchedule {
    pub fn new(resolutions: Vec<(usize, usize)>, start_stage: usize) -> Result<Self> {
        if resolutions.len() < 2 {
            return invalid_arg("a schedule needs at least two stages");
        }
        if resolutions.iter().any(|&(h, w)| h == 0 || w == 0) {
            return invalid_arg("stage resolutions must be nonzero");
        }
        if resolutions.windows(2).any(|p| p[1].0 * p[1].1 < p[0].0 * p[0].1) {
            return invalid_arg("stage token counts must be non-decreasing");
        }
        if resolutions.windows(2).any(|p| p[1].0 < p[0].0 || p[1].1 < p[0].1) {
            return invalid_arg("stage resolutions must not shrink along either axis");
        }
        if start_stage < 1 || start_stage > resolutions.len() {
            return invalid_arg(format!("start stage {start_stage} outside 1..={}", resolutions.len()));
        }
        Ok(Self {
            resolutions,
            start_stage,
        })
    }

    /// Square stages with the given side lengths.
    pub fn square(sides: &[usize], start_stage: usize) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect(), start_stage)
    }

    /// Toy default: sides 1, 2, 3, 4, 6, 8, 12, 16, 24, 32, exclusion from
    /// the antepenultimate stage.
    pub fn toy_default() -> Self {
        Self::square(&[1, 2, 3, 4, 6, 8, 12, 16, 24, 32], 8).expect("valid default schedule")
    }

    pub fn stages(&self) -> usize {
        self.resolutions.len()
    }

    pub fn start_stage(&self) -> usize {
        self.start_stage
    }

    pub fn resolutions(&self) -> &[(usize, usize)] {
        &self.resolutions
    }

    /// Resolution of stage `k` (1-based).
    pub fn resolution(&self, k: usize) -> (usize, usize) {
        self.resolutions[k - 1]
    }

    pub fn with_start_stage(&self, start_stage: usize) -> Result<Self> {
        Self::new(self.resolutions.clone(), start_stage)
    }

    /// Tokens in all stages strictly before `k`.
    pub fn tokens_before(&self, k: usize) -> usize {
        self.resolutions[..k - 1].iter().map(|(h, w)| h * w).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_validation() {
        assert!(StageSchedule::square(&[1], 1).is_err());
        assert!(StageSchedule::square(&[2, 1], 1).is_err());
        assert!(StageSchedule::square(&[1, 2], 0).is_err());
        assert!(StageSchedule::square(&[1, 2], 3).is_err());
        let s = StageSchedule::square(&[1, 2, 4], 3).unwrap();
        assert_eq!(s.stages(), 3);
        assert_eq!(s.resolution(2), (2, 2));
        assert_eq!(s.tokens_before(3), 5);
    }

    #[test]
    fn grid_rejects_bad_data() {
        assert!(Grid::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Grid::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(ScalarGrid::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn nearest_parent_upsampling() {
        let m = Mask::from_fn(2, 2, |i, j| i == 0 && j == 1);
        let up = m.upsample_nearest(4, 4);
        let expect = Mask::from_fn(4, 4, |i, j| i < 2 && j >= 2);
        assert_eq!(up, expect);
        let odd = Mask::from_fn(2, 2, |i, _| i == 1).upsample_nearest(3, 3);
        assert_eq!(odd.positions(), vec![(2, 0), (2, 1), (2, 2)]);
    }

    #[test]
    fn max_of_empty_is_zero() {
        assert_eq!(ScalarGrid::zeros(0, 0).max(), 0.0);
        assert_eq!(ScalarGrid::new(1, 2, vec![-1.0, 3.0]).unwrap().max(), 3.0);
    }
}
