//! Invariant battery run against a configured stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::grid::ScalarGrid;
use crate::interp::interpolate_scalar;
use crate::metrics::cost_report;
use crate::sparsifier::{RunOutput, SparsifierParams};
use crate::stack::ToyStack;
use crate::walkthrough::{self, WalkthroughPredictor};

pub const PROPERTIES: [&str; 7] = [
    "dense_equivalence_tau0",
    "dense_equivalence_alpha1",
    "mask_monotonicity",
    "anchor_activity",
    "cost_law_replay",
    "interpolation_linearity",
    "walkthrough_fixture",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOptions {
    /// Clear one inherited exclusion bit before checking monotonicity.
    pub inject_fault: bool,
    pub interp_grids: usize,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            inject_fault: false,
            interp_grids: 200,
            seed: 0,
        }
    }
}

fn same_bits(a: &RunOutput, b: &RunOutput) -> bool {
    let bits = |g: &crate::grid::Grid| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    bits(&a.image) == bits(&b.image)
        && a.cache_sizes == b.cache_sizes
        && a.logits_history.len() == b.logits_history.len()
        && a.logits_history
            .iter()
            .zip(&b.logits_history)
            .all(|(x, y)| bits(x) == bits(y))
}

fn result(name: &'static str, passed: bool, detail: impl Into<String>) -> PropertyResult {
    PropertyResult {
        name,
        passed,
        detail: detail.into(),
    }
}

fn linearity(count: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..count {
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let (th, tw) = (h + rng.random_range(0..10), w + rng.random_range(0..10));
        let (a, b) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let x = ScalarGrid::from_fn(h, w, |_, _| rng.random_range(-100.0..100.0))?;
        let y = ScalarGrid::from_fn(h, w, |_, _| rng.random_range(-100.0..100.0))?;
        let mix = ScalarGrid::from_fn(h, w, |i, j| a * x.get(i, j) + b * y.get(i, j))?;
        let (ix, iy, im) = (
            interpolate_scalar(&x, th, tw)?,
            interpolate_scalar(&y, th, tw)?,
            interpolate_scalar(&mix, th, tw)?,
        );
        for i in 0..th {
            for j in 0..tw {
                let (p, q) = (a * ix.get(i, j), b * iy.get(i, j));
                if (im.get(i, j) - (p + q)).abs() > 1e-12 * (p.abs() + q.abs() + f64::MIN_POSITIVE) {
                    return Ok((false, format!("grid {n} breaks linearity at ({i},{j})")));
                }
            }
        }
    }
    Ok((true, format!("{count} random grids")))
}

/// Runs every property in [`PROPERTIES`] order.
pub fn run_battery(stack: &ToyStack, params: &SparsifierParams, opts: &OracleOptions) -> Result<Vec<PropertyResult>> {
    let pipe = stack.pipeline();
    let dense = pipe.run_dense(params.selected_block)?;
    let mut out = Vec::with_capacity(PROPERTIES.len());

    let tau0 = pipe.run_sparse(&SparsifierParams {
        tau: 0.0,
        ..params.clone()
    })?;
    out.push(result(
        PROPERTIES[0],
        same_bits(&dense, &tau0),
        "sparse run at tau 0 against dense",
    ));
    let alpha1 = pipe.run_sparse(&SparsifierParams {
        alpha: 1,
        ..params.clone()
    })?;
    out.push(result(
        PROPERTIES[1],
        same_bits(&dense, &alpha1),
        "sparse run at alpha 1 against dense",
    ));

    let mut sparse = pipe.run_sparse(params)?;
    let mut note = String::new();
    if opts.inject_fault {
        note = if sparse.exclusion.inject_fault() {
            "; fault injected".into()
        } else {
            "; fault requested but no inherited bit to clear".into()
        };
    }
    let mono = sparse.exclusion.monotonicity_violations();
    let injected_nothing = opts.inject_fault && note.contains("no inherited");
    out.push(result(
        PROPERTIES[2],
        mono.is_empty() && !injected_nothing,
        format!(
            "{} violations over {} sparse stages{note}",
            mono.len(),
            sparse.exclusion.stages.len()
        ),
    ));
    let anchors = sparse.exclusion.anchor_violations();
    out.push(result(
        PROPERTIES[3],
        anchors.is_empty(),
        format!("{} inactive anchors", anchors.len()),
    ));

    let mut replay = true;
    let mut bounds = true;
    for run in [&dense, &tau0, &alpha1, &sparse] {
        let rep = cost_report(&run.stats, params.alpha, params.start_stage)?;
        replay &= rep.replay_exact();
        bounds &= rep.bounds_hold();
    }
    out.push(result(
        PROPERTIES[4],
        replay && bounds,
        format!("measured counts replay: {replay}; within-stage bounds: {bounds}"),
    ));

    let (lin, detail) = linearity(opts.interp_grids, opts.seed)?;
    out.push(result(PROPERTIES[5], lin, detail));

    let walk = WalkthroughPredictor::run()?;
    let bad = walkthrough::deviations(&walk);
    out.push(result(
        PROPERTIES[6],
        bad.is_empty(),
        if bad.is_empty() {
            "masks, assignments, fills and pairs reproduce".into()
        } else {
            bad.join("; ")
        },
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::StageSchedule;
    use crate::stack::StackConfig;
    use crate::toymodel::ModelConfig;

    fn small() -> (ToyStack, SparsifierParams) {
        let model = ModelConfig {
            n_blocks: 3,
            d_model: 8,
            n_heads: 2,
            vocab: 16,
            ..ModelConfig::default()
        };
        let cfg = StackConfig {
            fixture: Some(crate::fixture::FlatTextureFixture::new(model.d_model)),
            model,
            schedule: StageSchedule::square(&[1, 2, 4, 6, 8], 3).unwrap(),
            ..StackConfig::default()
        };
        let params = SparsifierParams {
            start_stage: 3,
            ..SparsifierParams::default()
        };
        (ToyStack::build(&cfg).unwrap(), params)
    }

    #[test]
    fn battery_passes_and_names_each_property_once() {
        let (stack, params) = small();
        let res = run_battery(
            &stack,
            &params,
            &OracleOptions {
                interp_grids: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let names: Vec<_> = res.iter().map(|r| r.name).collect();
        assert_eq!(names, PROPERTIES);
        assert!(res.iter().all(|r| r.passed), "{res:?}");
    }

    #[test]
    fn injected_fault_breaks_monotonicity_only() {
        let (stack, params) = small();
        let opts = OracleOptions {
            inject_fault: true,
            interp_grids: 5,
            ..Default::default()
        };
        let res = run_battery(&stack, &params, &opts).unwrap();
        for r in &res {
            assert_eq!(r.passed, r.name != "mask_monotonicity", "{r:?}");
        }
    }
}
