use serde::{Deserialize, Serialize};

use super::{AnchorAssignment, AnchorSet};
use crate::grid::{nearest_parent, Mask};

/// Exclusion bookkeeping for one stage `k >= P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageExclusion {
    pub stage: usize,
    /// Low-frequency set, including inherited positions. May contain anchors.
    pub low: Mask,
    /// Tokens the backbone actually ran: the complement of `low`, plus anchors.
    pub active: Mask,
    pub anchors: AnchorSet,
    pub assignment: AnchorAssignment,
}

/// All sparse stages of one run, in stage order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionState {
    pub stages: Vec<StageExclusion>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// A position whose nearest parent was low-frequency is not.
    Inheritance {
        stage: usize,
        pos: (usize, usize),
        parent: (usize, usize),
    },
    /// An anchor did not run.
    InactiveAnchor { stage: usize, pos: (usize, usize) },
}

impl ExclusionState {
    pub fn stage(&self, k: usize) -> Option<&StageExclusion> {
        self.stages.iter().find(|s| s.stage == k)
    }

    pub fn monotonicity_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for pair in self.stages.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            let child = (cur.low.h(), cur.low.w());
            let parent = (prev.low.h(), prev.low.w());
            for i in 0..child.0 {
                for j in 0..child.1 {
                    let p = nearest_parent((i, j), child, parent);
                    if prev.low.get(p.0, p.1) && !cur.low.get(i, j) {
                        out.push(Violation::Inheritance {
                            stage: cur.stage,
                            pos: (i, j),
                            parent: p,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn anchor_violations(&self) -> Vec<Violation> {
        self.stages
            .iter()
            .flat_map(|s| {
                s.anchors
                    .positions
                    .iter()
                    .filter(|&&(i, j)| !s.active.get(i, j))
                    .map(|&pos| Violation::InactiveAnchor { stage: s.stage, pos })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Test hook: clears one inherited low-frequency bit so that the
    /// monotonicity check has something to catch. Returns whether a bit was
    /// flipped (there must be an inherited position to clear).
    pub fn inject_fault(&mut self) -> bool {
        for idx in 1..self.stages.len() {
            let (head, tail) = self.stages.split_at_mut(idx);
            let prev = &head[idx - 1];
            let cur = &mut tail[0];
            let child = (cur.low.h(), cur.low.w());
            let parent = (prev.low.h(), prev.low.w());
            for i in 0..child.0 {
                for j in 0..child.1 {
                    let p = nearest_parent((i, j), child, parent);
                    if prev.low.get(p.0, p.1) && cur.low.get(i, j) {
                        cur.low.set(i, j, false);
                        return true;
                    }
                }
            }
        }
        false
    }
}
