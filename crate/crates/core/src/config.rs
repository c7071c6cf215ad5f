//! Run configuration files. A TOML document is merged over the defaults, so
//! any subset of keys may be given; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::codec::{LATENT_DIM, NUM_LATENTS};
use crate::error::{Error, Result};
use crate::flow::ShallowConfig;
use crate::pretzel::ModelConfig;
use crate::training::TrainConfig;
use crate::vocab::VOCAB_SIZE;

pub const MAX_SEQ: usize = 160;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `gen-data`; empty means the codec and records
    /// are generated in memory from `seed`.
    pub dir: String,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub codec_scenes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub prompts: usize,
    pub temperature: f64,
    pub analysis_prompts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage0: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage3: TrainConfig,
    pub eval: EvalConfig,
}

fn backbone(layers: usize, width: usize, heads: usize) -> BackboneConfig {
    BackboneConfig { layers, width, heads, ff_mult: 4.0, vocab: VOCAB_SIZE, max_seq: MAX_SEQ }
}

impl Default for RunConfig {
    /// Desk-scale defaults: 4×128 language stream, 6×128 deep flow, two
    /// 2-layer shallow blocks of width 64, batch 64.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                latents: NUM_LATENTS,
                latent_dim: LATENT_DIM,
                vlm: backbone(4, 128, 4),
                deep: backbone(6, 128, 4),
                shallow: ShallowConfig { blocks: 2, layers: 2, width: 64, heads: 4, ff_mult: 4.0 },
            },
            data: DataConfig {
                dir: String::new(),
                train_scenes: 10_000,
                heldout_scenes: 500,
                codec_scenes: 10_000,
                seed: 1,
            },
            stage0: TrainConfig::for_stage(0),
            stage1: TrainConfig::for_stage(1),
            stage2: TrainConfig::for_stage(2),
            stage3: TrainConfig::for_stage(3),
            eval: EvalConfig { prompts: 500, temperature: 1.0, analysis_prompts: 50, seed: 7 },
        }
    }
}

impl RunConfig {
    /// A reduced model and budget that runs the whole pipeline in minutes
    /// on one core.
    pub fn compact() -> Self {
        let mut c = RunConfig::default();
        c.model.vlm = BackboneConfig { ff_mult: 2.0, ..backbone(2, 64, 4) };
        c.model.deep = BackboneConfig { ff_mult: 2.0, ..backbone(2, 64, 4) };
        c.model.shallow = ShallowConfig { blocks: 2, layers: 1, width: 32, heads: 2, ff_mult: 2.0 };
        for (s, steps, lr) in [(0, 3000, 3e-3), (1, 6000, 2e-3), (2, 1000, 2e-3), (3, 1500, 1e-3)] {
            let t = c.stage_mut(s);
            t.steps = steps;
            t.lr = lr;
            t.batch = 32;
        }
        c
    }

    pub fn stage(&self, stage: u8) -> &TrainConfig {
        match stage {
            0 => &self.stage0,
            1 => &self.stage1,
            2 => &self.stage2,
            _ => &self.stage3,
        }
    }

    pub fn stage_mut(&mut self, stage: u8) -> &mut TrainConfig {
        match stage {
            0 => &mut self.stage0,
            1 => &mut self.stage1,
            2 => &mut self.stage2,
            _ => &mut self.stage3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.latents != NUM_LATENTS || self.model.latent_dim != LATENT_DIM {
            return Err(Error::Config(format!(
                "the codec produces {NUM_LATENTS}×{LATENT_DIM} latents; model expects {}×{}",
                self.model.latents, self.model.latent_dim
            )));
        }
        for s in 0..4u8 {
            let t = self.stage(s);
            if t.stage != s {
                return Err(Error::Config(format!("table stage{s} declares stage = {}", t.stage)));
            }
            t.validate()?;
        }
        if self.eval.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Parses `text` over `base` (the defaults unless a preset is chosen).
    pub fn from_toml_over(text: &str, base: &RunConfig) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a top-level `preset = "compact"` selects the
    /// reduced base.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base = match table.remove("preset") {
            None => RunConfig::default(),
            Some(toml::Value::String(s)) if s == "default" => RunConfig::default(),
            Some(toml::Value::String(s)) if s == "compact" => RunConfig::compact(),
            Some(v) => return Err(Error::Config(format!("unknown preset {v}"))),
        };
        Self::from_toml_over(&table.to_string(), &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
