//! A three-stage scripted backbone (1x1, 2x2, 4x4) whose logits and traces
//! are fixed by hand, so every mask, anchor assignment and fill of a sparse
//! run can be worked out by hand.

use crate::error::Result;
use crate::grid::{FeatureGrid, Grid, StageSchedule};
use crate::quantizer::{Codebook, ToyDecoder};
use crate::sparsifier::{Pipeline, RunOutput, SparsifierParams, StagePredictor};
use crate::toymodel::{BlockTrace, CacheTag, StageOutput, StageRequest};

/// A backbone with hand-set logits and traces for a 1x1, 2x2, 4x4 schedule.
///
/// Channels 2, vocabulary 3, one block. The stage-2 trace gives an MSE change
/// map of `[[0, 1], [4, 9]]`.
pub struct WalkthroughPredictor;

pub const TAU: f64 = 0.5;
pub const ALPHA: usize = 2;
pub const BETA: f64 = 0.9;

impl WalkthroughPredictor {
    pub fn schedule() -> StageSchedule {
        StageSchedule::square(&[1, 2, 4], 3).unwrap()
    }

    pub fn codebook() -> Codebook {
        Codebook::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap()
    }

    pub fn decoder() -> ToyDecoder {
        ToyDecoder::new(2, vec![0.5, -0.25, 1.0, 0.75, 0.1, -0.5]).unwrap()
    }

    /// Sparse run with the walkthrough's parameters.
    pub fn run() -> Result<RunOutput> {
        let (schedule, codebook, decoder) = (Self::schedule(), Self::codebook(), Self::decoder());
        Pipeline::new(&WalkthroughPredictor, &schedule, &codebook, &decoder).run_sparse(&Self::params())
    }

    pub fn params() -> SparsifierParams {
        SparsifierParams {
            tau: TAU,
            alpha: ALPHA,
            beta: BETA,
            start_stage: 3,
            selected_block: 1,
        }
    }

    fn stage_logits(stage: usize) -> Grid {
        match stage {
            1 => Grid::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap(),
            2 => Grid::new(
                2,
                2,
                3,
                vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 5.0],
            )
            .unwrap(),
            _ => {
                let vals: [((usize, usize), [f64; 3]); 8] = [
                    ((0, 0), [0.0, 0.0, 1.0]),
                    ((0, 2), [0.0, 1.0, 0.0]),
                    ((2, 0), [1.0, 0.0, 0.0]),
                    ((2, 2), [0.5, 0.2, 0.1]),
                    ((2, 3), [0.0, 3.0, 1.0]),
                    ((3, 1), [2.0, 0.0, 1.0]),
                    ((3, 2), [0.0, 0.0, 4.0]),
                    ((3, 3), [1.0, 2.0, 3.0]),
                ];
                // Positions outside this script get a marker that must never
                // reach the output.
                Grid::from_fn(4, 4, 3, |i, j| {
                    vals.iter()
                        .find(|(p, _)| *p == (i, j))
                        .map(|(_, v)| v.to_vec())
                        .unwrap_or_else(|| vec![-7.0, 9.0, -7.0])
                })
                .unwrap()
            }
        }
    }
}

impl StagePredictor for WalkthroughPredictor {
    fn channels(&self) -> usize {
        2
    }

    fn vocab(&self) -> usize {
        3
    }

    fn blocks(&self) -> usize {
        1
    }

    fn first_input(&self, h: usize, w: usize) -> FeatureGrid {
        Grid::zeros(h, w, 2)
    }

    fn predict(&self, req: &StageRequest, _trace_block: usize) -> Result<StageOutput> {
        let (h, w) = (req.input.h(), req.input.w());
        let script = Self::stage_logits(req.stage);
        let logits = Grid::from_fn(h, w, 3, |i, j| {
            if req.active.get(i, j) {
                script.at(i, j).to_vec()
            } else {
                vec![0.0; 3]
            }
        })?;
        let after = if req.stage == 2 {
            Grid::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0])?
        } else {
            Grid::zeros(h, w, 1)
        };
        let positions = req.active.positions();
        let mut cache = req.cache.clone();
        for &(row, col) in &positions {
            cache.push(
                CacheTag {
                    stage: req.stage,
                    row,
                    col,
                },
                &[(vec![0.0; 2], vec![0.0; 2])],
            );
        }
        let n_active = positions.len();
        let n_cache = req.cache.len();
        Ok(StageOutput {
            logits,
            trace: BlockTrace {
                block: 1,
                before: Grid::zeros(h, w, 1),
                after,
            },
            cache,
            n_active,
            n_cache,
            attended_pairs: (n_active * (n_cache + n_active)) as u64,
            empty: n_active == 0,
        })
    }
}

/// Expected stage-3 outcome of [`WalkthroughPredictor::run`].
pub mod expected {
    pub const LOW: [[u8; 4]; 4] = [[1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]];
    pub const ACTIVE: [[u8; 4]; 4] = [[1, 0, 1, 0], [0, 0, 0, 0], [1, 0, 1, 1], [0, 1, 1, 1]];
    /// Excluded non-anchor positions, row-major, with the assigned anchor
    /// index, or `None` for a zero fill.
    pub const ASSIGNMENT: [((usize, usize), Option<usize>); 8] = [
        ((0, 1), Some(2)),
        ((0, 3), None),
        ((1, 0), Some(0)),
        ((1, 1), Some(2)),
        ((1, 2), None),
        ((1, 3), Some(3)),
        ((2, 1), None),
        ((3, 0), Some(1)),
    ];
    pub const PAIRS: [u64; 3] = [1, 20, 104];
}

/// Mismatches between a run and [`expected`]; empty when it reproduces.
pub fn deviations(out: &RunOutput) -> Vec<String> {
    use crate::sparsifier::Fill;
    let mut bad = Vec::new();
    let Some(st) = out.exclusion.stage(3) else {
        return vec!["no sparse stage 3".into()];
    };
    for i in 0..4 {
        for j in 0..4 {
            if st.low.get(i, j) != (expected::LOW[i][j] == 1) {
                bad.push(format!("low mask at ({i},{j})"));
            }
            if st.active.get(i, j) != (expected::ACTIVE[i][j] == 1) {
                bad.push(format!("active mask at ({i},{j})"));
            }
        }
    }
    let got: Vec<((usize, usize), Option<usize>)> = st
        .assignment
        .entries
        .iter()
        .map(|&(p, f)| match f {
            Fill::Anchor { anchor, .. } => (p, Some(anchor)),
            Fill::Zero => (p, None),
        })
        .collect();
    if got != expected::ASSIGNMENT {
        bad.push(format!("assignment {got:?}"));
    }
    for &(p, a) in &expected::ASSIGNMENT {
        let filled = out.logits_history[2].at(p.0, p.1);
        let want: &[f64] = match a {
            Some(idx) => {
                let (ai, aj) = st.anchors.positions[idx];
                out.logits_history[2].at(ai, aj)
            }
            None => &[0.0; 3],
        };
        if filled != want {
            bad.push(format!("fill at {p:?}"));
        }
    }
    let pairs: Vec<u64> = out.stats.stages.iter().map(|s| s.attended_pairs).collect();
    if pairs != expected::PAIRS {
        bad.push(format!("pairs {pairs:?}"));
    }
    bad
}
