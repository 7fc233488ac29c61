//! TOML run configuration. Every section and key is optional; omitted keys
//! take the toy defaults. Unknown keys are rejected so typos surface as
//! configuration errors instead of silently running the default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use sparsevar::oracle::OracleOptions;
use sparsevar::{
    FlatTextureFixture, MetricKind, MetricSweep, ModelConfig, SparsifierParams, StackConfig, StageSchedule,
};

/// Environment variable that replaces `[run] output_dir`.
pub const OUTPUT_DIR_ENV: &str = "SPARSEVAR_OUTPUT_DIR";

const DEFAULT_SIDES: [usize; 10] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32];

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelSection,
    schedule: ScheduleSection,
    sparsifier: SparsifierSection,
    fixture: FixtureSection,
    codebook: CodebookSection,
    decoder: DecoderSection,
    run: RunSection,
    oracle: OracleSection,
    compare: CompareSection,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    n_blocks: usize,
    d_model: usize,
    n_heads: usize,
    vocab: usize,
    seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_blocks: m.n_blocks,
            d_model: m.d_model,
            n_heads: m.n_heads,
            vocab: m.vocab,
            seed: m.seed,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScheduleSection {
    sides: Option<Vec<usize>>,
    resolutions: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SparsifierSection {
    tau: f64,
    alpha: usize,
    beta: f64,
    start_stage: usize,
    selected_block: usize,
    metric: String,
}

impl Default for SparsifierSection {
    fn default() -> Self {
        let p = SparsifierParams::default();
        Self {
            tau: p.tau,
            alpha: p.alpha,
            beta: p.beta,
            start_stage: p.start_stage,
            selected_block: p.selected_block,
            metric: MetricKind::MseChange.name().into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FixtureSection {
    enabled: bool,
    seed: u64,
    amplitude: f64,
    patch: [f64; 4],
}

impl Default for FixtureSection {
    fn default() -> Self {
        Self {
            enabled: true,
            seed: FlatTextureFixture::DEFAULT_SEED,
            amplitude: FlatTextureFixture::DEFAULT_AMPLITUDE,
            patch: FlatTextureFixture::DEFAULT_PATCH,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CodebookSection {
    seed: u64,
}

impl Default for CodebookSection {
    fn default() -> Self {
        Self {
            seed: StackConfig::DEFAULT_CODEBOOK_SEED,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DecoderSection {
    seed: u64,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            seed: StackConfig::DEFAULT_DECODER_SEED,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    mode: String,
    output_dir: PathBuf,
    dump_masks: bool,
    dump_maps: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: "both".into(),
            output_dir: PathBuf::from("sparsevar-out"),
            dump_masks: true,
            dump_maps: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OracleSection {
    inject_fault: bool,
    interp_grids: usize,
    seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        let o = OracleOptions::default();
        Self {
            inject_fault: o.inject_fault,
            interp_grids: o.interp_grids,
            seed: o.seed,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareSection {
    mse: Option<Vec<f64>>,
    logits: Option<Vec<f64>>,
    l1: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Dense,
    Sparse,
    Both,
}

impl Mode {
    pub fn dense(self) -> bool {
        self != Mode::Sparse
    }

    pub fn sparse(self) -> bool {
        self != Mode::Dense
    }
}

/// A fully validated configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub stack: StackConfig,
    pub params: SparsifierParams,
    pub metric: MetricKind,
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub dump_masks: bool,
    pub dump_maps: bool,
    pub oracle: OracleOptions,
    pub compare: MetricSweep,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let file: FileConfig = toml::from_str(text)?;
        let sp = &file.sparsifier;
        let params = SparsifierParams {
            tau: sp.tau,
            alpha: sp.alpha,
            beta: sp.beta,
            start_stage: sp.start_stage,
            selected_block: sp.selected_block,
        };
        let metric: MetricKind = sp.metric.parse()?;

        let model = ModelConfig {
            n_blocks: file.model.n_blocks,
            d_model: file.model.d_model,
            n_heads: file.model.n_heads,
            vocab: file.model.vocab,
            seed: file.model.seed,
            selected_block: sp.selected_block,
        };
        model.validate()?;

        let resolutions: Vec<(usize, usize)> = match (&file.schedule.sides, &file.schedule.resolutions) {
            (Some(_), Some(_)) => bail!("[schedule] takes either sides or resolutions, not both"),
            (Some(s), None) => s.iter().map(|&s| (s, s)).collect(),
            (None, Some(r)) => r.iter().map(|&[h, w]| (h, w)).collect(),
            (None, None) => DEFAULT_SIDES.iter().map(|&s| (s, s)).collect(),
        };
        let schedule = StageSchedule::new(resolutions, params.start_stage)?;
        params.validate(schedule.stages(), model.n_blocks)?;

        let fx = &file.fixture;
        if !(fx.amplitude.is_finite() && fx.amplitude >= 0.0) {
            bail!("fixture amplitude must be finite and nonnegative");
        }
        let [top, left, bottom, right] = fx.patch;
        if !(0.0 <= top && top < bottom && bottom <= 1.0 && 0.0 <= left && left < right && right <= 1.0) {
            bail!("fixture patch must satisfy 0 <= top < bottom <= 1 and 0 <= left < right <= 1");
        }
        let fixture = fx.enabled.then_some(FlatTextureFixture {
            seed: fx.seed,
            channels: model.d_model,
            amplitude: fx.amplitude,
            patch: fx.patch,
        });

        let mode = match file.run.mode.as_str() {
            "dense" => Mode::Dense,
            "sparse" => Mode::Sparse,
            "both" => Mode::Both,
            other => bail!("unknown run mode {other:?} (dense, sparse, both)"),
        };

        let cmp = &file.compare;
        let mut compare = MetricSweep::default();
        for (kind, list) in &mut compare.entries {
            let custom = match kind {
                MetricKind::MseChange => &cmp.mse,
                MetricKind::LogitsNeighborSim => &cmp.logits,
                MetricKind::L1DecodeDiff => &cmp.l1,
            };
            if let Some(values) = custom {
                if values.is_empty() {
                    bail!("[compare] {} has an empty threshold list", kind.name());
                }
                if let Some(bad) = values.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                    bail!("[compare] {} threshold {bad} outside [0, 1]", kind.name());
                }
                *list = values.clone();
            }
        }

        Ok(Self {
            stack: StackConfig {
                model,
                codebook_seed: file.codebook.seed,
                decoder_seed: file.decoder.seed,
                schedule,
                fixture,
            },
            params,
            metric,
            mode,
            output_dir: file.run.output_dir,
            dump_masks: file.run.dump_masks,
            dump_maps: file.run.dump_maps,
            oracle: OracleOptions {
                inject_fault: file.oracle.inject_fault,
                interp_grids: file.oracle.interp_grids,
                seed: file.oracle.seed,
            },
            compare,
        })
    }
}
