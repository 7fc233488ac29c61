//! The default toy stack: a model whose head is tied to a seeded codebook,
//! a seeded decoder, the stage schedule and the structured fixture.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fixture::{Conditioner, FlatTextureFixture};
use crate::grid::{Mask, ScalarGrid, StageSchedule};
use crate::interp::{accumulate, interpolate_channels};
use crate::metrics::per_block_mse_maps;
use crate::quantizer::{quantize_lookup, Codebook, ToyDecoder};
use crate::sparsifier::{Pipeline, StagePredictor};
use crate::toymodel::{Model, ModelConfig, StageCache, StageRequest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub model: ModelConfig,
    pub codebook_seed: u64,
    pub decoder_seed: u64,
    pub schedule: StageSchedule,
    /// Conditioning applied to every stage; `None` runs unconditioned.
    pub fixture: Option<FlatTextureFixture>,
}

impl StackConfig {
    pub const DEFAULT_CODEBOOK_SEED: u64 = 11;
    pub const DEFAULT_DECODER_SEED: u64 = 13;
}

impl Default for StackConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let fixture = Some(FlatTextureFixture::new(model.d_model));
        Self {
            model,
            codebook_seed: Self::DEFAULT_CODEBOOK_SEED,
            decoder_seed: Self::DEFAULT_DECODER_SEED,
            schedule: StageSchedule::toy_default(),
            fixture,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyStack {
    pub model: Model,
    pub codebook: Codebook,
    pub decoder: ToyDecoder,
    pub schedule: StageSchedule,
    pub fixture: Option<FlatTextureFixture>,
}

impl ToyStack {
    pub fn build(cfg: &StackConfig) -> Result<Self> {
        let mut model = Model::init(cfg.model.clone())?;
        let codebook = Codebook::seeded(cfg.model.vocab, cfg.model.d_model, cfg.codebook_seed)?;
        model.tie_head(&codebook)?;
        let decoder = ToyDecoder::seeded(cfg.model.d_model, cfg.decoder_seed)?;
        if let Some(f) = &cfg.fixture {
            if f.channels != cfg.model.d_model {
                return crate::error::invalid_arg(format!(
                    "fixture has {} channels, model has {}",
                    f.channels, cfg.model.d_model
                ));
            }
        }
        Ok(Self {
            model,
            codebook,
            decoder,
            schedule: cfg.schedule.clone(),
            fixture: cfg.fixture.clone(),
        })
    }

    pub fn pipeline(&self) -> Pipeline<'_, Model> {
        let p = Pipeline::new(&self.model, &self.schedule, &self.codebook, &self.decoder);
        match &self.fixture {
            Some(f) => p.with_conditioning(f),
            None => p,
        }
    }

    /// Replays the dense run and returns, for every stage, one MSE change map
    /// per consecutive block pair.
    pub fn dense_block_maps(&self) -> Result<Vec<Vec<ScalarGrid>>> {
        let mut cache = StageCache::new();
        let mut prev = None;
        let mut maps = Vec::with_capacity(self.schedule.stages());
        for k in 1..=self.schedule.stages() {
            let (h, w) = self.schedule.resolution(k);
            let input = match &prev {
                None => self.model.first_input(h, w),
                Some(r) => interpolate_channels(r, h, w)?,
            };
            let cond = self.fixture.as_ref().map(|f| f.conditioning(k, h, w));
            let active = Mask::filled(h, w, true);
            let req = StageRequest {
                stage: k,
                input: &input,
                conditioning: cond.as_ref(),
                cache: &cache,
                active: &active,
            };
            maps.push(per_block_mse_maps(&self.model, &req)?);
            let out = self.model.run_stage(&req)?;
            let residual = quantize_lookup(&out.logits, &self.codebook, &active)?;
            prev = Some(match prev {
                None => residual,
                Some(p) => accumulate(&p, &residual)?,
            });
            cache = out.cache;
        }
        Ok(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_maps_match_the_traced_dense_run() {
        let cfg = StackConfig {
            model: ModelConfig {
                n_blocks: 3,
                d_model: 8,
                n_heads: 2,
                vocab: 16,
                ..ModelConfig::default()
            },
            schedule: StageSchedule::square(&[1, 2, 4, 6], 3).unwrap(),
            fixture: Some(FlatTextureFixture::new(8)),
            ..StackConfig::default()
        };
        let stack = ToyStack::build(&cfg).unwrap();
        let maps = stack.dense_block_maps().unwrap();
        for s in 2..=3 {
            let dense = stack.pipeline().run_dense(s).unwrap();
            for (k, stage) in maps.iter().enumerate() {
                assert_eq!(stage.len(), 2);
                let a: Vec<u64> = stage[s - 2].data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = dense.mse_maps[k].data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b, "stage {} block {s}", k + 1);
            }
        }
    }
}
