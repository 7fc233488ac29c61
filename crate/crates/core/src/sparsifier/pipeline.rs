//! Stage loop for dense and sparse next-scale generation.

use serde::{Deserialize, Serialize};

use super::{
    anchor_grid, assign_anchors, inherit, mse_change_map, select_low_frequency, threshold_mask, Direction,
    ExclusionState, Fill, SparsifierParams, StageExclusion,
};
use crate::error::{invalid_arg, Error, Result};
use crate::fixture::Conditioner;
use crate::grid::{FeatureGrid, Grid, ImageGrid, LogitsGrid, Mask, ScalarGrid, StageSchedule};
use crate::interp::{accumulate, interpolate_channels, interpolate_scalar};
use crate::metrics::{l1_stage_diff, logits_neighbor_similarity, MetricKind};
use crate::quantizer::{quantize_lookup, Codebook, ToyDecoder};
use crate::toymodel::{Model, StageCache, StageOutput, StageRequest};

/// A backbone that predicts logits for the active tokens of one stage.
pub trait StagePredictor {
    fn channels(&self) -> usize;
    fn vocab(&self) -> usize;
    fn blocks(&self) -> usize;
    /// Input map for the first stage.
    fn first_input(&self, h: usize, w: usize) -> FeatureGrid;
    fn predict(&self, req: &StageRequest, trace_block: usize) -> Result<StageOutput>;
}

impl StagePredictor for Model {
    fn channels(&self) -> usize {
        self.config().d_model
    }

    fn vocab(&self) -> usize {
        self.config().vocab
    }

    fn blocks(&self) -> usize {
        self.config().n_blocks
    }

    fn first_input(&self, h: usize, w: usize) -> FeatureGrid {
        self.prompt_grid(h, w)
    }

    fn predict(&self, req: &StageRequest, trace_block: usize) -> Result<StageOutput> {
        self.run_stage_traced(req, trace_block)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RunMode {
    Dense,
    Sparse {
        params: SparsifierParams,
        metric: MetricKind,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub n_active: usize,
    pub n_cache: usize,
    pub attended_pairs: u64,
    /// Fraction of the stage's tokens in the low-frequency set.
    pub s_k: f64,
    /// Anchor count (0 for dense stages).
    pub anchors: usize,
    pub anchor_copies: usize,
    pub zero_fills: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub stages: Vec<StageStats>,
    /// Extra decode steps spent on token identification: one per sparse
    /// stage under the l1 metric, each decoding the last two accumulated maps.
    #[serde(default)]
    pub extra_decodes: usize,
}

impl RunStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn total_pairs(&self) -> u64 {
        self.stages.iter().map(|s| s.attended_pairs).sum()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub image: ImageGrid,
    /// Per stage: logits after anchor filling (zeros where nothing was filled).
    pub logits_history: Vec<LogitsGrid>,
    /// Per stage: the accumulated map `r_k`.
    pub accumulated: Vec<FeatureGrid>,
    /// Per stage: the MSE change map of the traced block.
    pub mse_maps: Vec<ScalarGrid>,
    /// Cache length after each stage.
    pub cache_sizes: Vec<usize>,
    pub stats: RunStats,
    pub exclusion: ExclusionState,
}

/// Model, schedule, codebook and decoder for one generation.
pub struct Pipeline<'a, P: StagePredictor + ?Sized> {
    pub predictor: &'a P,
    pub schedule: &'a StageSchedule,
    pub codebook: &'a Codebook,
    pub decoder: &'a ToyDecoder,
    pub conditioning: Option<&'a dyn Conditioner>,
}

impl<'a, P: StagePredictor + ?Sized> Pipeline<'a, P> {
    pub fn new(predictor: &'a P, schedule: &'a StageSchedule, codebook: &'a Codebook, decoder: &'a ToyDecoder) -> Self {
        Self {
            predictor,
            schedule,
            codebook,
            decoder,
            conditioning: None,
        }
    }

    pub fn with_conditioning(mut self, cond: &'a dyn Conditioner) -> Self {
        self.conditioning = Some(cond);
        self
    }

    /// Every stage runs every token.
    pub fn run_dense(&self, trace_block: usize) -> Result<RunOutput> {
        self.run(&RunMode::Dense, trace_block)
    }

    /// Drops low-frequency tokens from `params.start_stage` on, identified by
    /// the MSE change of `params.selected_block`.
    pub fn run_sparse(&self, params: &SparsifierParams) -> Result<RunOutput> {
        self.run_sparse_with(params, MetricKind::MseChange)
    }

    /// As [`Self::run_sparse`] with an alternative identification rule.
    pub fn run_sparse_with(&self, params: &SparsifierParams, metric: MetricKind) -> Result<RunOutput> {
        self.run(
            &RunMode::Sparse {
                params: params.clone(),
                metric,
            },
            params.selected_block,
        )
    }

    fn check(&self) -> Result<()> {
        let c = self.predictor.channels();
        if self.codebook.channels() != c || self.decoder.channels() != c {
            return invalid_arg(format!(
                "codebook ({}) and decoder ({}) channels must match the model ({c})",
                self.codebook.channels(),
                self.decoder.channels()
            ));
        }
        if self.codebook.vocab() != self.predictor.vocab() {
            return invalid_arg(format!(
                "codebook vocabulary {} does not match the model's {}",
                self.codebook.vocab(),
                self.predictor.vocab()
            ));
        }
        Ok(())
    }

    pub fn run(&self, mode: &RunMode, trace_block: usize) -> Result<RunOutput> {
        self.check()?;
        if trace_block < 1 || trace_block > self.predictor.blocks() {
            return invalid_arg(format!("trace block {trace_block} out of range"));
        }
        if let RunMode::Sparse { params, .. } = mode {
            params.validate(self.schedule.stages(), self.predictor.blocks())?;
        }
        let c = self.predictor.channels();
        let mut cache = StageCache::new();
        let mut logits_history: Vec<LogitsGrid> = Vec::new();
        let mut accumulated: Vec<FeatureGrid> = Vec::new();
        let mut mse_maps: Vec<ScalarGrid> = Vec::new();
        let mut cache_sizes = Vec::new();
        let mut stats = RunStats::default();
        let mut exclusion = ExclusionState::default();

        for k in 1..=self.schedule.stages() {
            let (h, w) = self.schedule.resolution(k);
            let input = match accumulated.last() {
                None => self.predictor.first_input(h, w),
                Some(r) => interpolate_channels(r, h, w)?,
            };
            let cond = self.conditioning.map(|cd| cd.conditioning(k, h, w));
            let sparse = match mode {
                RunMode::Sparse { params, metric } if k >= params.start_stage => Some((params, *metric)),
                _ => None,
            };

            let (low, anchors, active) = match sparse {
                None => (None, None, Mask::filled(h, w, true)),
                Some((params, metric)) => {
                    let inherited = exclusion.stages.last().map(|s| &s.low);
                    let low = self.identify(
                        metric,
                        params.tau,
                        (h, w),
                        inherited,
                        &logits_history,
                        &accumulated,
                        &mse_maps,
                        &mut stats,
                    )?;
                    let anchors = anchor_grid(h, w, params.alpha)?;
                    let active = low.not().or(&anchors.mask());
                    (Some(low), Some(anchors), active)
                }
            };

            let req = StageRequest {
                stage: k,
                input: &input,
                conditioning: cond.as_ref(),
                cache: &cache,
                active: &active,
            };
            let out = self.predictor.predict(&req, trace_block)?;
            let mse = mse_change_map(&out.trace, &active)?;

            let mut filled = out.logits.clone();
            let mut has_logits = active.clone();
            let mut stage_stats = StageStats {
                k,
                h,
                w,
                n_active: out.n_active,
                n_cache: out.n_cache,
                attended_pairs: out.attended_pairs,
                s_k: 0.0,
                anchors: 0,
                anchor_copies: 0,
                zero_fills: 0,
                empty: out.empty,
            };

            if let (Some(low), Some(anchors), Some((params, _))) = (low, anchors, sparse) {
                let prev = logits_history
                    .last()
                    .ok_or_else(|| Error::InvalidState("sparse stage without previous logits".into()))?;
                let assignment = assign_anchors(prev, (h, w), &low, &anchors, params.beta)?;
                for &((i, j), fill) in &assignment.entries {
                    if let Fill::Anchor { anchor, .. } = fill {
                        let (ai, aj) = anchors.positions[anchor];
                        let src = out.logits.at(ai, aj).to_vec();
                        filled.at_mut(i, j).copy_from_slice(&src);
                        has_logits.set(i, j, true);
                    }
                }
                stage_stats.s_k = low.fraction();
                stage_stats.anchors = anchors.len();
                stage_stats.anchor_copies = assignment.copies();
                stage_stats.zero_fills = assignment.zero_fills();
                exclusion.stages.push(StageExclusion {
                    stage: k,
                    low,
                    active: active.clone(),
                    anchors,
                    assignment,
                });
            }

            let residual = quantize_lookup(&filled, self.codebook, &has_logits)?;
            let r = match accumulated.last() {
                None => residual,
                Some(prev) => accumulate(prev, &residual)?,
            };
            debug_assert_eq!(r.c(), c);

            cache = out.cache;
            cache_sizes.push(cache.len());
            stats.stages.push(stage_stats);
            logits_history.push(filled);
            accumulated.push(r);
            mse_maps.push(mse);
        }

        let image = self.decoder.decode(accumulated.last().expect("at least two stages"))?;
        Ok(RunOutput {
            image,
            logits_history,
            accumulated,
            mse_maps,
            cache_sizes,
            stats,
            exclusion,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn identify(
        &self,
        metric: MetricKind,
        tau: f64,
        target: (usize, usize),
        inherited: Option<&Mask>,
        logits_history: &[LogitsGrid],
        accumulated: &[FeatureGrid],
        mse_maps: &[ScalarGrid],
        stats: &mut RunStats,
    ) -> Result<Mask> {
        let missing = || Error::InvalidState("identification needs a previous stage".into());
        match metric {
            MetricKind::MseChange => {
                let delta = mse_maps.last().ok_or_else(missing)?;
                select_low_frequency(delta, target, tau, inherited)
            }
            MetricKind::LogitsNeighborSim => {
                let prev = logits_history.last().ok_or_else(missing)?;
                let sim = logits_neighbor_similarity(prev, target)?;
                Ok(inherit(threshold_mask(&sim, tau, Direction::Above), inherited))
            }
            MetricKind::L1DecodeDiff => {
                let n = accumulated.len();
                let last = accumulated.last().ok_or_else(missing)?;
                let before = if n >= 2 {
                    accumulated[n - 2].clone()
                } else {
                    Grid::zeros(1, 1, last.c())
                };
                let diff = l1_stage_diff(last, &before, self.decoder)?;
                stats.extra_decodes += 1;
                let up = interpolate_scalar(&diff, target.0, target.1)?;
                Ok(inherit(threshold_mask(&up, tau, Direction::Below), inherited))
            }
        }
    }
}
