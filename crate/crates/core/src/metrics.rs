//! Alternative identification metrics, diagnostic maps and attention-cost
//! accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_state, Result};
use crate::grid::{FeatureGrid, Grid, LogitsGrid, ScalarGrid};
use crate::interp::interpolate_channels;
use crate::quantizer::ToyDecoder;
use crate::sparsifier::{
    cosine, mse_change_map, Direction, Pipeline, RunOutput, RunStats, SparsifierParams, StagePredictor,
};
use crate::toymodel::{BlockTrace, Model, StageRequest};

/// How low-frequency tokens are identified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    /// Previous-stage MSE change of the selected block; low below threshold.
    MseChange,
    /// Mean cosine similarity of upsampled logits to the 3x3 neighborhood;
    /// low above threshold.
    LogitsNeighborSim,
    /// l1 change of the decoded image between the last two stages; low
    /// below threshold.
    L1DecodeDiff,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [
        MetricKind::MseChange,
        MetricKind::LogitsNeighborSim,
        MetricKind::L1DecodeDiff,
    ];

    pub fn direction(self) -> Direction {
        match self {
            MetricKind::LogitsNeighborSim => Direction::Above,
            MetricKind::MseChange | MetricKind::L1DecodeDiff => Direction::Below,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MseChange => "mse",
            MetricKind::LogitsNeighborSim => "logits",
            MetricKind::L1DecodeDiff => "l1",
        }
    }

    /// Threshold sweep used for metric comparisons.
    pub fn default_sweep(self) -> Vec<f64> {
        match self {
            MetricKind::MseChange | MetricKind::LogitsNeighborSim => {
                vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
            }
            MetricKind::L1DecodeDiff => vec![0.04, 0.05, 0.06, 0.07, 0.1, 0.2, 0.3],
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(MetricKind::MseChange),
            "logits" => Ok(MetricKind::LogitsNeighborSim),
            "l1" => Ok(MetricKind::L1DecodeDiff),
            other => invalid_arg(format!("unknown metric {other:?} (mse, logits, l1)")),
        }
    }
}

/// Upsamples `prev` to `target` and averages, per position, the cosine
/// similarity to each in-bounds neighbor of its 3x3 window. A position with
/// no neighbors scores 0.
pub fn logits_neighbor_similarity(prev: &LogitsGrid, target: (usize, usize)) -> Result<ScalarGrid> {
    let up = interpolate_channels(prev, target.0, target.1)?;
    let (h, w) = target;
    ScalarGrid::from_fn(h, w, |i, j| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                    continue;
                }
                sum += cosine(up.at(i, j), up.at(ni as usize, nj as usize));
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    })
}

/// Mean over RGB of `|decode(current) - decode(upsample(previous))|`.
pub fn l1_stage_diff(current: &FeatureGrid, previous: &FeatureGrid, dec: &ToyDecoder) -> Result<ScalarGrid> {
    if current.c() != previous.c() {
        return invalid_arg("accumulated maps have different channel counts");
    }
    let a = dec.decode(current)?;
    let b = dec.decode(&interpolate_channels(previous, current.h(), current.w())?)?;
    ScalarGrid::from_fn(current.h(), current.w(), |i, j| {
        a.at(i, j)
            .iter()
            .zip(b.at(i, j))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 3.0
    })
}

/// MSE change for every consecutive block pair: entry `s - 2` compares the
/// outputs of blocks `s - 1` and `s`, for `s = 2..=N`.
pub fn per_block_mse_maps(model: &Model, req: &StageRequest) -> Result<Vec<ScalarGrid>> {
    let outputs = model.block_outputs(req)?;
    outputs
        .windows(2)
        .enumerate()
        .skip(1)
        .map(|(b, pair)| {
            let trace = BlockTrace {
                block: b + 1,
                before: pair[0].clone(),
                after: pair[1].clone(),
            };
            mse_change_map(&trace, req.active)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    /// Attended pairs as recorded by the run.
    pub measured_pairs: u64,
    /// `(n_retained + n_cache) * n_retained` from the recorded counts.
    pub predicted_pairs: u64,
    /// Query-key pairs among the stage's own retained tokens.
    pub within_pairs: u64,
    /// Pairs a dense run performs at this stage.
    pub dense_pairs: u64,
    /// `(1 - s_k + 1/alpha^2)^2 (h w)^2`.
    pub closed_form_bound: f64,
    /// The bound with the actual anchor fraction `|A| / (h w)` in place of
    /// `1/alpha^2`.
    pub anchor_count_bound: f64,
    /// `|A| / (h w) - 1/alpha^2`: the gap the integer anchor count opens.
    pub anchor_excess: f64,
    /// `within_pairs <= anchor_count_bound`.
    pub within_bound_holds: bool,
    /// `within_pairs <= closed_form_bound`.
    pub closed_form_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub start_stage: usize,
    pub alpha: usize,
    pub stages: Vec<StageCost>,
    /// Dense pairs over sparse pairs, stages `>= start_stage`.
    pub speedup: f64,
    /// Sparse pairs over dense pairs, stages `>= start_stage`.
    pub pair_ratio: f64,
    /// The same ratio over all stages.
    pub total_pair_ratio: f64,
    pub extra_decodes: usize,
}

impl CostReport {
    /// Measured counts replay `n_active * (n_cache + n_active)` everywhere.
    pub fn replay_exact(&self) -> bool {
        self.stages.iter().all(|s| s.measured_pairs == s.predicted_pairs)
    }

    pub fn bounds_hold(&self) -> bool {
        self.stages.iter().all(|s| s.within_bound_holds)
    }
}

/// Cost accounting for a completed run. `start_stage` delimits the stages
/// over which the speedup is aggregated.
pub fn cost_report(stats: &RunStats, alpha: usize, start_stage: usize) -> Result<CostReport> {
    if alpha < 1 {
        return invalid_arg("alpha must be at least 1");
    }
    if stats.stages.is_empty() {
        return invalid_state("run statistics hold no stages");
    }
    if let Some((idx, s)) = stats.stages.iter().enumerate().find(|(i, s)| s.k != i + 1) {
        return invalid_state(format!("stage record {idx} is for stage {}, expected {}", s.k, idx + 1));
    }
    if start_stage < 1 || start_stage > stats.stages.len() {
        return invalid_state(format!("start stage {start_stage} not covered by the run"));
    }
    let inv_a2 = 1.0 / (alpha * alpha) as f64;
    let mut dense_cache = 0u64;
    let mut stages = Vec::with_capacity(stats.stages.len());
    for s in &stats.stages {
        let n = (s.h * s.w) as u64;
        let hw = n as f64;
        let retained = s.n_active as u64;
        let predicted = (retained + s.n_cache as u64) * retained;
        let within = retained * retained;
        let dense_pairs = n * (dense_cache + n);
        dense_cache += n;
        let anchor_frac = if s.anchors == 0 { inv_a2 } else { s.anchors as f64 / hw };
        let keep = 1.0 - s.s_k;
        let closed = (keep + inv_a2).powi(2) * hw * hw;
        let counted = (keep + anchor_frac.max(inv_a2)).powi(2) * hw * hw;
        // Bounds are compared with a relative epsilon to absorb the rounding in s_k.
        let fits = |bound: f64| within as f64 <= bound * (1.0 + 1e-12);
        stages.push(StageCost {
            k: s.k,
            h: s.h,
            w: s.w,
            measured_pairs: s.attended_pairs,
            predicted_pairs: predicted,
            within_pairs: within,
            dense_pairs,
            closed_form_bound: closed,
            anchor_count_bound: counted,
            anchor_excess: anchor_frac - inv_a2,
            within_bound_holds: fits(counted),
            closed_form_holds: fits(closed),
        });
    }
    let sum = |from: usize, f: fn(&StageCost) -> u64| -> u64 { stages.iter().filter(|s| s.k >= from).map(f).sum() };
    let sparse = sum(start_stage, |s| s.measured_pairs);
    let dense = sum(start_stage, |s| s.dense_pairs);
    let speedup = if sparse == 0 {
        f64::INFINITY
    } else {
        dense as f64 / sparse as f64
    };
    Ok(CostReport {
        start_stage,
        alpha,
        speedup,
        pair_ratio: sparse as f64 / dense as f64,
        total_pair_ratio: sum(1, |s| s.measured_pairs) as f64 / sum(1, |s| s.dense_pairs) as f64,
        extra_decodes: stats.extra_decodes,
        stages,
    })
}

/// Threshold lists per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSweep {
    pub entries: Vec<(MetricKind, Vec<f64>)>,
}

impl Default for MetricSweep {
    fn default() -> Self {
        Self {
            entries: MetricKind::ALL.iter().map(|&m| (m, m.default_sweep())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: MetricKind,
    pub threshold: f64,
    /// Low-frequency tokens over all tokens of stages `>= P`.
    pub exclusion_fraction: f64,
    /// Mean absolute pixel difference to the dense image.
    pub l1_error: f64,
    /// Sparse over dense attended pairs, stages `>= P`.
    pub pair_ratio: f64,
    pub extra_decodes: usize,
}

/// Token-weighted low-frequency fraction over the sparse stages.
pub fn exclusion_fraction(run: &RunOutput) -> f64 {
    let (low, total) = run
        .exclusion
        .stages
        .iter()
        .fold((0usize, 0usize), |(l, t), s| (l + s.low.count(), t + s.low.len()));
    if total == 0 {
        0.0
    } else {
        low as f64 / total as f64
    }
}

pub fn image_l1(a: &Grid, b: &Grid) -> Result<f64> {
    if !a.same_shape(b) {
        return invalid_arg("images differ in shape");
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
}

/// Runs the sparse pipeline once per `(metric, threshold)`, changing only the
/// identification rule, and compares each result against the dense run.
pub fn compare_metrics<P: StagePredictor + ?Sized>(
    pipeline: &Pipeline<P>,
    base: &SparsifierParams,
    sweep: &MetricSweep,
) -> Result<Vec<MetricRow>> {
    let dense = pipeline.run_dense(base.selected_block)?;
    let mut rows = Vec::new();
    for (metric, thresholds) in &sweep.entries {
        if thresholds.is_empty() {
            return invalid_arg(format!("empty threshold list for metric {}", metric.name()));
        }
        for &t in thresholds {
            let params = SparsifierParams { tau: t, ..base.clone() };
            let run = pipeline.run_sparse_with(&params, *metric)?;
            let report = cost_report(&run.stats, params.alpha, params.start_stage)?;
            rows.push(MetricRow {
                metric: *metric,
                threshold: t,
                exclusion_fraction: exclusion_fraction(&run),
                l1_error: image_l1(&run.image, &dense.image)?,
                pair_ratio: report.pair_ratio,
                extra_decodes: run.stats.extra_decodes,
            });
        }
    }
    Ok(rows)
}

pub fn metric_rows_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,threshold,exclusion_fraction,l1_error,pair_ratio,extra_decodes\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.metric.name(),
            r.threshold,
            r.exclusion_fraction,
            r.l1_error,
            r.pair_ratio,
            r.extra_decodes
        );
    }
    s
}
