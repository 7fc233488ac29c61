//! A seeded block-stack transformer that runs one stage of next-scale
//! prediction over an arbitrary subset of active tokens.
//!
//! Each block is `x += g * attn(x)` followed by `x += g * mlp(x)`. Queries
//! and keys are computed from an RMS-normalized copy of the residual stream;
//! values and the MLP see the stream itself, so a block's update grows with
//! the energy of the token it is applied to. Only active tokens enter the
//! sequence: they are the queries, they are the within-stage keys, and only
//! they are appended to the cache. Cached tokens from earlier stages are
//! visible to every query.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid_arg, Error, Result};
use crate::grid::{FeatureGrid, Grid, LogitsGrid, Mask};
use crate::io::{read_f64s, write_f64s};
use crate::quantizer::Codebook;

pub const MODEL_MAGIC: &[u8; 4] = b"SSMD";

/// Residual-branch gain applied to both the attention and MLP updates.
pub const BRANCH_GAIN: f64 = 0.5;
/// Peak amplitude of the positional encoding added to each input token.
pub const POS_AMPLITUDE: f64 = 0.5;
const MLP_EXPANSION: usize = 4;
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub seed: u64,
    /// 1-based block whose update drives frequency estimation.
    pub selected_block: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            d_model: 16,
            n_heads: 4,
            vocab: 64,
            seed: 7,
            selected_block: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 2 {
            return invalid_arg("the model needs at least two blocks");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return invalid_arg(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab == 0 {
            return invalid_arg("vocabulary must be nonempty");
        }
        if self.selected_block < 1 || self.selected_block > self.n_blocks {
            return invalid_arg(format!(
                "selected block {} outside 1..={}",
                self.selected_block, self.n_blocks
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * MLP_EXPANSION
    }
}

/// Dense row-major weight matrix applied as `y = x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
}

impl Linear {
    fn seeded(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        let gain = 1.0 / (input as f64).sqrt();
        let weight = (0..input * output)
            .map(|_| gain * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { input, output, weight }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.output];
        for (xi, row) in x.iter().zip(self.weight.chunks_exact(self.output)) {
            for (yo, w) in y.iter_mut().zip(row) {
                *yo += xi * w;
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub w1: Linear,
    pub w2: Linear,
}

impl Block {
    fn seeded(rng: &mut ChaCha8Rng, c: usize, hidden: usize) -> Self {
        Self {
            wq: Linear::seeded(rng, c, c),
            wk: Linear::seeded(rng, c, c),
            wv: Linear::seeded(rng, c, c),
            wo: Linear::seeded(rng, c, c),
            w1: Linear::seeded(rng, c, hidden),
            w2: Linear::seeded(rng, hidden, c),
        }
    }

    fn linears(&self) -> [&Linear; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
    }

    fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

/// Smooth sinusoidal code keyed by stage and fractional row/column.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub row_freq: Vec<f64>,
    pub col_freq: Vec<f64>,
    pub phase: Vec<f64>,
    pub stage_phase: Vec<f64>,
}

impl PositionalEncoding {
    fn seeded(rng: &mut ChaCha8Rng, c: usize) -> Self {
        let mut draw = |scale: f64| -> Vec<f64> { (0..c).map(|_| scale * rng.random::<f64>()).collect() };
        let row_freq = draw(2.0);
        let col_freq = draw(2.0);
        let phase = draw(2.0 * PI);
        let stage_phase = draw(1.0);
        Self {
            row_freq,
            col_freq,
            phase,
            stage_phase,
        }
    }

    pub fn encode(&self, stage: usize, (i, j): (usize, usize), (h, w): (usize, usize)) -> Vec<f64> {
        let y = i as f64 / h as f64;
        let x = j as f64 / w as f64;
        (0..self.phase.len())
            .map(|c| {
                POS_AMPLITUDE
                    * (2.0 * PI * (self.row_freq[c] * y + self.col_freq[c] * x)
                        + self.phase[c]
                        + self.stage_phase[c] * stage as f64)
                        .sin()
            })
            .collect()
    }

    fn params(&self) -> [&Vec<f64>; 4] {
        [&self.row_freq, &self.col_freq, &self.phase, &self.stage_phase]
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.row_freq,
            &mut self.col_freq,
            &mut self.phase,
            &mut self.stage_phase,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheTag {
    pub stage: usize,
    pub row: usize,
    pub col: usize,
}

/// Append-only key/value store ordered by (stage, row-major position).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageCache {
    tags: Vec<CacheTag>,
    /// Per block: `len * d_model` keys.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl StageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[CacheTag] {
        &self.tags
    }

    pub fn keys(&self, block: usize) -> &[f64] {
        self.keys.get(block).map_or(&[], Vec::as_slice)
    }

    pub fn values(&self, block: usize) -> &[f64] {
        self.values.get(block).map_or(&[], Vec::as_slice)
    }

    /// Appends one token. `kv` holds one `(key, value)` pair per block and
    /// may be empty for predictors that do not attend.
    pub fn push(&mut self, tag: CacheTag, kv: &[(Vec<f64>, Vec<f64>)]) {
        if self.keys.len() < kv.len() {
            self.keys.resize(kv.len(), Vec::new());
            self.values.resize(kv.len(), Vec::new());
        }
        for (b, (k, v)) in kv.iter().enumerate() {
            self.keys[b].extend_from_slice(k);
            self.values[b].extend_from_slice(v);
        }
        self.tags.push(tag);
    }
}

/// Outputs of blocks `block - 1` and `block` (block 0 is the embedded input)
/// at the active positions of one stage; inactive positions hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    pub block: usize,
    pub before: FeatureGrid,
    pub after: FeatureGrid,
}

/// Everything a backbone reads to run one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageRequest<'a> {
    /// 1-based stage index.
    pub stage: usize,
    /// Upsampled accumulated map (or the prompt map for the first stage).
    pub input: &'a FeatureGrid,
    /// Optional spatial conditioning added after input normalization.
    pub conditioning: Option<&'a FeatureGrid>,
    pub cache: &'a StageCache,
    pub active: &'a Mask,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    /// Logits at active positions, zeros elsewhere.
    pub logits: LogitsGrid,
    pub trace: BlockTrace,
    pub cache: StageCache,
    pub n_active: usize,
    pub n_cache: usize,
    pub attended_pairs: u64,
    /// The active mask was empty; nothing ran.
    pub empty: bool,
}

/// Head-averaged attention probabilities for one block: one row per active
/// query, columns are cached tokens followed by the active tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub queries: usize,
    pub keys: usize,
    pub data: Vec<f64>,
}

impl AttentionMatrix {
    pub fn row(&self, q: usize) -> &[f64] {
        &self.data[q * self.keys..(q + 1) * self.keys]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    pub prompt: Vec<f64>,
    pub positional: PositionalEncoding,
    pub blocks: Vec<Block>,
    /// `vocab x d_model` output embedding; logits are `embedding . x`.
    pub embedding: Vec<f64>,
}

#[derive(Default)]
struct Want {
    trace_block: usize,
    all_blocks: bool,
    attention: bool,
}

struct Forward {
    output: StageOutput,
    blocks: Vec<FeatureGrid>,
    attention: Vec<AttentionMatrix>,
}

pub(crate) fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

pub(crate) fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

impl Model {
    /// Draws every weight from a ChaCha8 stream keyed by `cfg.seed`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.d_model;
        let prompt = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let positional = PositionalEncoding::seeded(&mut rng, c);
        let blocks = (0..cfg.n_blocks)
            .map(|_| Block::seeded(&mut rng, c, cfg.hidden()))
            .collect();
        let gain = 1.0 / (c as f64).sqrt();
        let embedding = (0..cfg.vocab * c)
            .map(|_| gain * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            cfg,
            prompt,
            positional,
            blocks,
            embedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Uses the codebook table as the output head, so each logit scores a
    /// codebook entry against the final features.
    pub fn tie_head(&mut self, cb: &Codebook) -> Result<()> {
        if cb.vocab() != self.cfg.vocab || cb.channels() != self.cfg.d_model {
            return invalid_arg(format!(
                "codebook is {}x{}, model head is {}x{}",
                cb.vocab(),
                cb.channels(),
                self.cfg.vocab,
                self.cfg.d_model
            ));
        }
        self.embedding = cb.table().to_vec();
        Ok(())
    }

    /// The prompt vector broadcast over an `h x w` map.
    pub fn prompt_grid(&self, h: usize, w: usize) -> FeatureGrid {
        Grid::from_fn(h, w, self.cfg.d_model, |_, _| self.prompt.clone()).expect("finite prompt")
    }

    /// All weights in checkpoint order.
    pub fn weights(&self) -> Vec<f64> {
        let mut out = self.prompt.clone();
        for p in self.positional.params() {
            out.extend_from_slice(p);
        }
        for b in &self.blocks {
            for l in b.linears() {
                out.extend_from_slice(&l.weight);
            }
        }
        out.extend_from_slice(&self.embedding);
        out
    }

    /// SHA-256 over the little-endian weight stream, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in self.weights() {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Runs one stage, tracing the configured selected block.
    pub fn run_stage(&self, req: &StageRequest) -> Result<StageOutput> {
        self.run_stage_traced(req, self.cfg.selected_block)
    }

    /// Runs one stage, tracing the outputs of blocks `block - 1` and `block`.
    pub fn run_stage_traced(&self, req: &StageRequest, block: usize) -> Result<StageOutput> {
        Ok(self
            .forward(
                req,
                Want {
                    trace_block: block,
                    ..Want::default()
                },
            )?
            .output)
    }

    /// Per-block head-averaged attention for one stage.
    pub fn dump_attention(&self, req: &StageRequest) -> Result<Vec<AttentionMatrix>> {
        Ok(self
            .forward(
                req,
                Want {
                    trace_block: self.cfg.selected_block,
                    attention: true,
                    ..Want::default()
                },
            )?
            .attention)
    }

    /// Outputs of every block (index 0 is the embedded input) at active
    /// positions, zeros elsewhere.
    pub fn block_outputs(&self, req: &StageRequest) -> Result<Vec<FeatureGrid>> {
        Ok(self
            .forward(
                req,
                Want {
                    trace_block: self.cfg.selected_block,
                    all_blocks: true,
                    ..Want::default()
                },
            )?
            .blocks)
    }

    fn check_request(&self, req: &StageRequest) -> Result<()> {
        let c = self.cfg.d_model;
        let (h, w) = (req.input.h(), req.input.w());
        if req.input.c() != c {
            return invalid_arg(format!("input has {} channels, model expects {c}", req.input.c()));
        }
        if (req.active.h(), req.active.w()) != (h, w) {
            return invalid_arg(format!(
                "active mask is {}x{}, input is {h}x{w}",
                req.active.h(),
                req.active.w()
            ));
        }
        if let Some(cond) = req.conditioning {
            if (cond.h(), cond.w(), cond.c()) != (h, w, c) {
                return invalid_arg("conditioning map must match the input shape");
            }
        }
        if req.stage == 0 {
            return invalid_arg("stages are 1-based");
        }
        Ok(())
    }

    /// Embedded token: normalized input, plus position code, plus conditioning.
    pub fn embed_token(&self, req: &StageRequest, pos: (usize, usize)) -> Vec<f64> {
        let (h, w) = (req.input.h(), req.input.w());
        let mut x = layer_norm(req.input.at(pos.0, pos.1));
        for (xv, p) in x.iter_mut().zip(self.positional.encode(req.stage, pos, (h, w))) {
            *xv += p;
        }
        if let Some(cond) = req.conditioning {
            for (xv, cv) in x.iter_mut().zip(cond.at(pos.0, pos.1)) {
                *xv += cv;
            }
        }
        x
    }

    fn forward(&self, req: &StageRequest, want: Want) -> Result<Forward> {
        self.check_request(req)?;
        if want.trace_block < 1 || want.trace_block > self.cfg.n_blocks {
            return invalid_arg(format!("trace block {} out of range", want.trace_block));
        }
        let c = self.cfg.d_model;
        let (h, w) = (req.input.h(), req.input.w());
        let positions = req.active.positions();
        let n_active = positions.len();
        let n_cache = req.cache.len();
        let n_keys = n_cache + n_active;
        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x: Vec<Vec<f64>> = positions.iter().map(|&p| self.embed_token(req, p)).collect();
        let scatter = |tokens: &[Vec<f64>]| -> FeatureGrid {
            let mut g = Grid::zeros(h, w, c);
            for (&(i, j), t) in positions.iter().zip(tokens) {
                g.at_mut(i, j).copy_from_slice(t);
            }
            g
        };

        let mut blocks_out = Vec::new();
        let mut before = None;
        let mut after = None;
        let mut record = |b: usize, x: &[Vec<f64>]| {
            if want.all_blocks {
                blocks_out.push(scatter(x));
            }
            if b + 1 == want.trace_block {
                before = Some(scatter(x));
            }
            if b == want.trace_block {
                after = Some(scatter(x));
            }
        };
        record(0, &x);

        let mut attention = Vec::new();
        let mut new_kv: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::with_capacity(self.blocks.len()); n_active];

        for (b, block) in self.blocks.iter().enumerate() {
            let mut keys = Vec::with_capacity(n_keys * c);
            let mut values = Vec::with_capacity(n_keys * c);
            keys.extend_from_slice(req.cache.keys(b));
            values.extend_from_slice(req.cache.values(b));
            if keys.len() != n_cache * c || values.len() != n_cache * c {
                return Err(Error::InvalidState(format!(
                    "cache holds {} tokens but block {b} has {} key values",
                    n_cache,
                    keys.len()
                )));
            }
            let mut queries = Vec::with_capacity(n_active);
            for (t, xt) in x.iter().enumerate() {
                let n = rms_norm(xt);
                let q = block.wq.apply(&n);
                let k = block.wk.apply(&n);
                let v = block.wv.apply(xt);
                keys.extend_from_slice(&k);
                values.extend_from_slice(&v);
                new_kv[t].push((k, v));
                queries.push(q);
            }

            let mut probs_avg = if want.attention {
                vec![0.0; n_active * n_keys]
            } else {
                Vec::new()
            };
            let mut scores = vec![0.0; n_keys];
            for (t, q) in queries.iter().enumerate() {
                let mut mixed = vec![0.0; c];
                for hh in 0..heads {
                    let off = hh * hd;
                    let qh = &q[off..off + hd];
                    let mut max = f64::NEG_INFINITY;
                    for (s, key) in scores.iter_mut().zip(keys.chunks_exact(c)) {
                        let dot: f64 = qh.iter().zip(&key[off..off + hd]).map(|(a, b)| a * b).sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for (s, val) in scores.iter().zip(values.chunks_exact(c)) {
                        let p = s / total;
                        for (m, v) in mixed[off..off + hd].iter_mut().zip(&val[off..off + hd]) {
                            *m += p * v;
                        }
                    }
                    if want.attention {
                        let row = &mut probs_avg[t * n_keys..(t + 1) * n_keys];
                        for (r, s) in row.iter_mut().zip(&scores) {
                            *r += s / total / heads as f64;
                        }
                    }
                }
                let o = block.wo.apply(&mixed);
                for (xv, ov) in x[t].iter_mut().zip(o) {
                    *xv += BRANCH_GAIN * ov;
                }
            }
            for xt in x.iter_mut() {
                let hidden: Vec<f64> = block.w1.apply(xt).into_iter().map(gelu).collect();
                for (xv, mv) in xt.iter_mut().zip(block.w2.apply(&hidden)) {
                    *xv += BRANCH_GAIN * mv;
                }
            }
            if want.attention {
                attention.push(AttentionMatrix {
                    queries: n_active,
                    keys: n_keys,
                    data: probs_avg,
                });
            }
            record(b + 1, &x);
        }

        let mut logits = Grid::zeros(h, w, self.cfg.vocab);
        for (&(i, j), xt) in positions.iter().zip(&x) {
            let out = logits.at_mut(i, j);
            for (l, e) in out.iter_mut().zip(self.embedding.chunks_exact(c)) {
                *l = e.iter().zip(xt).map(|(a, b)| a * b).sum();
            }
        }

        let mut cache = req.cache.clone();
        for (&(i, j), kv) in positions.iter().zip(&new_kv) {
            cache.push(
                CacheTag {
                    stage: req.stage,
                    row: i,
                    col: j,
                },
                kv,
            );
        }

        let output = StageOutput {
            logits,
            trace: BlockTrace {
                block: want.trace_block,
                before: before.expect("trace block recorded"),
                after: after.expect("trace block recorded"),
            },
            cache,
            n_active,
            n_cache,
            attended_pairs: (n_active * n_keys) as u64,
            empty: n_active == 0,
        };
        Ok(Forward {
            output,
            blocks: blocks_out,
            attention,
        })
    }

    /// Writes `SSMD`, the config, then the weight stream as little-endian f64.
    pub fn write_checkpoint(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MODEL_MAGIC)?;
        for v in [self.cfg.n_blocks, self.cfg.d_model, self.cfg.n_heads, self.cfg.vocab] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&self.cfg.seed.to_le_bytes())?;
        out.write_all(&(self.cfg.selected_block as u32).to_le_bytes())?;
        write_f64s(out, &self.weights())
    }

    pub fn read_checkpoint(input: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 32];
        input.read_exact(&mut head)?;
        if &head[..4] != MODEL_MAGIC {
            return Err(Error::Format("bad model checkpoint magic".into()));
        }
        let word = |k: usize| u32::from_le_bytes(head[k..k + 4].try_into().unwrap()) as usize;
        let cfg = ModelConfig {
            n_blocks: word(4),
            d_model: word(8),
            n_heads: word(12),
            vocab: word(16),
            seed: u64::from_le_bytes(head[20..28].try_into().unwrap()),
            selected_block: word(28),
        };
        cfg.validate()?;
        // Shapes come from a fresh init; the stream then overwrites every weight.
        let mut model = Model::init(cfg)?;
        let weights = read_f64s(input, model.weights().len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Format("non-finite weight in checkpoint".into()));
        }
        let mut it = weights.into_iter();
        let mut fill = |dst: &mut Vec<f64>| {
            for d in dst.iter_mut() {
                *d = it.next().expect("length checked");
            }
        };
        fill(&mut model.prompt);
        for p in model.positional.params_mut() {
            fill(p);
        }
        for b in &mut model.blocks {
            for l in b.linears_mut() {
                fill(&mut l.weight);
            }
        }
        fill(&mut model.embedding);
        Ok(model)
    }
}
