//! Frequency-aware token exclusion.
//!
//! A stage `k >= P` upsamples the previous stage's MSE change map, drops
//! every token whose value falls below `tau` times the map's global maximum
//! (plus everything already dropped upstream), keeps an `alpha x alpha` grid
//! of anchor tokens running regardless, and afterwards lets each dropped
//! token borrow the fresh logits of its most cosine-similar anchor.

mod pipeline;
mod state;

pub use pipeline::{Pipeline, RunMode, RunOutput, RunStats, StagePredictor, StageStats};
pub use state::{ExclusionState, StageExclusion, Violation};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_state, Result};
use crate::grid::{LogitsGrid, Mask, ScalarGrid};
use crate::interp::{interpolate_channels, interpolate_scalar};
use crate::toymodel::BlockTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsifierParams {
    /// Relative threshold in `[0, 1]`.
    pub tau: f64,
    /// Anchor grid pitch.
    pub alpha: usize,
    /// Cosine similarity a dropped token needs to borrow anchor logits.
    /// Values above 1 disable copying.
    pub beta: f64,
    /// First stage (1-based) at which tokens may be dropped. Must be >= 2.
    pub start_stage: usize,
    /// 1-based block whose update is measured.
    pub selected_block: usize,
}

impl Default for SparsifierParams {
    fn default() -> Self {
        Self {
            tau: 0.6,
            alpha: 4,
            beta: 0.9,
            start_stage: 8,
            selected_block: 2,
        }
    }
}

impl SparsifierParams {
    pub fn validate(&self, stages: usize, blocks: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return invalid_arg(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.alpha < 1 {
            return invalid_arg("alpha must be at least 1");
        }
        if !self.beta.is_finite() || self.beta < -1.0 {
            return invalid_arg(format!("beta {} must be finite and >= -1", self.beta));
        }
        if self.start_stage < 2 || self.start_stage > stages {
            return invalid_arg(format!("start stage {} outside 2..={stages}", self.start_stage));
        }
        if self.selected_block < 1 || self.selected_block > blocks {
            return invalid_arg(format!("selected block {} outside 1..={blocks}", self.selected_block));
        }
        Ok(())
    }
}

/// Top-left corners of the `alpha x alpha` cells covering an `h x w` grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub h: usize,
    pub w: usize,
    pub alpha: usize,
    /// Row-major anchor positions; an anchor's index is its place here.
    pub positions: Vec<(usize, usize)>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.h && j < self.w && i.is_multiple_of(self.alpha) && j.is_multiple_of(self.alpha)
    }

    pub fn mask(&self) -> Mask {
        Mask::from_fn(self.h, self.w, |i, j| self.contains(i, j))
    }
}

pub fn anchor_grid(h: usize, w: usize, alpha: usize) -> Result<AnchorSet> {
    if alpha < 1 {
        return invalid_arg("anchor grid size must be at least 1");
    }
    if h == 0 || w == 0 {
        return invalid_arg("anchor grid needs a nonempty map");
    }
    let positions = (0..h)
        .step_by(alpha)
        .flat_map(|i| (0..w).step_by(alpha).map(move |j| (i, j)))
        .collect();
    Ok(AnchorSet { h, w, alpha, positions })
}

/// Per-position mean over channels of the squared block update; exactly 0
/// at inactive positions.
pub fn mse_change_map(trace: &BlockTrace, active: &Mask) -> Result<ScalarGrid> {
    let (h, w) = (active.h(), active.w());
    let (a, b) = (&trace.after, &trace.before);
    if !a.same_shape(b) || (a.h(), a.w()) != (h, w) || a.c() == 0 {
        return invalid_state(format!(
            "block trace {}x{}x{} does not cover the {h}x{w} active mask",
            a.h(),
            a.w(),
            a.c()
        ));
    }
    let c = a.c() as f64;
    ScalarGrid::from_fn(h, w, |i, j| {
        if !active.get(i, j) {
            return 0.0;
        }
        a.at(i, j)
            .iter()
            .zip(b.at(i, j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / c
    })
}

/// Threshold direction for an identification map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Low frequency where `value < tau * max`.
    Below,
    /// Low frequency where `value > tau * max`.
    Above,
}

/// Marks positions of `map` relative to `tau` times its global maximum.
pub fn threshold_mask(map: &ScalarGrid, tau: f64, direction: Direction) -> Mask {
    let cut = tau * map.max();
    Mask::from_fn(map.h(), map.w(), |i, j| match direction {
        Direction::Below => map.get(i, j) < cut,
        Direction::Above => map.get(i, j) > cut,
    })
}

/// Unions `fresh` with `inherited` upsampled by the nearest-parent rule.
pub fn inherit(fresh: Mask, inherited: Option<&Mask>) -> Mask {
    match inherited {
        Some(prev) => fresh.or(&prev.upsample_nearest(fresh.h(), fresh.w())),
        None => fresh,
    }
}

/// Low-frequency set for a stage of size `target` from the previous
/// stage's MSE change map.
pub fn select_low_frequency(
    delta: &ScalarGrid,
    target: (usize, usize),
    tau: f64,
    inherited: Option<&Mask>,
) -> Result<Mask> {
    if let Some(prev) = inherited {
        if (prev.h(), prev.w()) != (delta.h(), delta.w()) {
            return invalid_arg("inherited mask must match the change map resolution");
        }
    }
    let upsampled = interpolate_scalar(delta, target.0, target.1)?;
    Ok(inherit(threshold_mask(&upsampled, tau, Direction::Below), inherited))
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Fill {
    /// Borrow the logits of anchor `anchor` (index into the anchor set).
    Anchor { anchor: usize, similarity: f64 },
    /// Leave logits and residual at zero.
    Zero,
}

/// Fill decisions for the dropped, non-anchor tokens of one stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    /// Row-major `(position, fill)` pairs.
    pub entries: Vec<((usize, usize), Fill)>,
}

impl AnchorAssignment {
    pub fn copies(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, f)| matches!(f, Fill::Anchor { .. }))
            .count()
    }

    pub fn zero_fills(&self) -> usize {
        self.entries.len() - self.copies()
    }
}

/// For every position of `excluded` that is not an anchor, finds the anchor
/// whose upsampled previous-stage logits are most cosine-similar (lowest
/// index on ties) and assigns it when the similarity reaches `beta`.
pub fn assign_anchors(
    prev_logits: &LogitsGrid,
    target: (usize, usize),
    excluded: &Mask,
    anchors: &AnchorSet,
    beta: f64,
) -> Result<AnchorAssignment> {
    if (excluded.h(), excluded.w()) != target || (anchors.h, anchors.w) != target {
        return invalid_arg("exclusion mask and anchors must match the target resolution");
    }
    let dropped: Vec<(usize, usize)> = excluded
        .positions()
        .into_iter()
        .filter(|&(i, j)| !anchors.contains(i, j))
        .collect();
    if dropped.is_empty() {
        return Ok(AnchorAssignment::default());
    }
    if anchors.is_empty() {
        return invalid_state("tokens were dropped but the anchor set is empty");
    }
    let up = interpolate_channels(prev_logits, target.0, target.1)?;
    let entries = dropped
        .into_iter()
        .map(|(i, j)| {
            let p = up.at(i, j);
            let mut best = (0, f64::NEG_INFINITY);
            for (idx, &(ai, aj)) in anchors.positions.iter().enumerate() {
                let s = cosine(p, up.at(ai, aj));
                if s > best.1 {
                    best = (idx, s);
                }
            }
            let fill = if best.1 >= beta {
                Fill::Anchor {
                    anchor: best.0,
                    similarity: best.1,
                }
            } else {
                Fill::Zero
            };
            ((i, j), fill)
        })
        .collect();
    Ok(AnchorAssignment { entries })
}
