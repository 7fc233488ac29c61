//! Frequency-aware token exclusion for next-scale prediction.
//!
//! A toy multi-stage generator predicts a whole token map per resolution,
//! coarse to fine. From a chosen stage on, tokens whose block-level feature
//! change marks them as low frequency are removed from attention entirely,
//! a uniform grid of anchor tokens keeps running, and removed tokens borrow
//! logits from the most similar anchor. Attention cost is counted exactly in
//! query-key pairs.

pub mod error;
pub mod fixture;
pub mod grid;
pub mod interp;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod quantizer;
pub mod sparsifier;
pub mod stack;
pub mod toymodel;
pub mod walkthrough;

pub use error::{Error, Result};
pub use fixture::{Conditioner, FlatTextureFixture};
pub use grid::{FeatureGrid, Grid, ImageGrid, LogitsGrid, Mask, ScalarGrid, StageSchedule};
pub use interp::{accumulate, interpolate_channels, interpolate_scalar};
pub use metrics::{compare_metrics, cost_report, CostReport, MetricKind, MetricRow, MetricSweep};
pub use quantizer::{quantize_lookup, Codebook, ToyDecoder};
pub use sparsifier::{
    anchor_grid, assign_anchors, mse_change_map, select_low_frequency, AnchorAssignment, AnchorSet, ExclusionState,
    Fill, Pipeline, RunMode, RunOutput, RunStats, SparsifierParams, StagePredictor, StageStats,
};
pub use stack::{StackConfig, ToyStack};
pub use toymodel::{BlockTrace, Model, ModelConfig, StageCache, StageOutput, StageRequest};
