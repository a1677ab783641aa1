//! Run configuration: presets, TOML overlay and command-line overrides.

use std::path::Path;

use reasonedit_core::diffusion::SamplerConfig;
use reasonedit_core::eval::{CompositeWeights, MaskMode};
use reasonedit_core::microworld::{WorldConfig, DEFAULT_TRAIN, DEFAULT_VAL};
use reasonedit_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small widths, 8×8 scenes.
    Desk,
    /// Reference widths and 16×16 scenes.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: MaskMode,
    pub weights: CompositeWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    /// Program and arguments; the request is written to its stdin.
    pub command: Vec<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerConfig>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let world = match preset {
            Preset::Desk => WorldConfig::desk(),
            Preset::Paper => WorldConfig::default(),
        };
        let model = Self::model_for(preset, &world);
        Self {
            preset,
            seed: 0,
            threads: 1,
            model,
            world,
            train: Self::train_for(preset),
            data: DataConfig {
                n_train: DEFAULT_TRAIN,
                n_val: DEFAULT_VAL,
            },
            sampler: SamplerConfig::default(),
            eval: EvalConfig {
                mode: MaskMode::Oracle,
                weights: CompositeWeights::default(),
            },
            scorer: None,
        }
    }

    /// The desk model is small enough to take a larger step and converge
    /// in fewer epochs.
    fn train_for(preset: Preset) -> TrainConfig {
        let base = TrainConfig::default();
        match preset {
            Preset::Desk => TrainConfig {
                lr: 1e-3,
                epochs: 30,
                ..base
            },
            Preset::Paper => base,
        }
    }

    fn model_for(preset: Preset, world: &WorldConfig) -> ModelConfig {
        match preset {
            Preset::Desk => ModelConfig::desk(world),
            Preset::Paper => ModelConfig::paper(world),
        }
    }

    /// Preset defaults overlaid with a TOML document. The document may set
    /// `preset`; world overrides are applied before the model defaults are
    /// derived from the world. Unknown keys are rejected.
    pub fn from_toml(text: &str, preset: Option<Preset>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match (preset, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            (None, None) => Preset::Desk,
        };
        let base = Self::preset(preset);
        let mut world = toml::Value::try_from(&base.world).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(w) = user.get("world") {
            merge(&mut world, w);
        }
        let world_cfg: WorldConfig = world.clone().try_into().map_err(|e: toml::de::Error| Error::Config(format!("world: {e}")))?;
        let mut doc = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let table = doc.as_table_mut().expect("config serializes to a table");
        table.insert("world".into(), world);
        table.insert(
            "model".into(),
            toml::Value::try_from(Self::model_for(preset, &world_cfg)).map_err(|e| Error::Config(e.to_string()))?,
        );
        table.insert("preset".into(), toml::Value::try_from(preset).map_err(|e| Error::Config(e.to_string()))?);
        for (k, v) in &user {
            if k == "world" || k == "preset" {
                continue;
            }
            match table.get_mut(k) {
                Some(slot) => merge(slot, v),
                None => {
                    table.insert(k.clone(), v.clone());
                }
            }
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, preset)
    }

    /// Applies `SWITCH=on|off`.
    pub fn ablate(&mut self, spec: &str) -> Result<()> {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation {spec:?} is not SWITCH=on|off")))?;
        let on = match value {
            "on" => true,
            "off" => false,
            _ => return Err(Error::Config(format!("ablation value {value:?} is not on or off"))),
        };
        self.model.switches.set(name, on).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let c = |e: reasonedit_core::Error| Error::Config(e.to_string());
        self.world.validate().map_err(c)?;
        self.model.validate().map_err(c)?;
        self.train.validate().map_err(c)?;
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return Err(Error::Config("data split sizes must be positive".into()));
        }
        if self.sampler.steps == 0 || !(self.sampler.temperature >= 0.0) {
            return Err(Error::Config("sampler needs at least one step and a non-negative temperature".into()));
        }
        let cells = self.world.height * self.world.width;
        if self.model.mllm.max_context < cells + 16 {
            return Err(Error::Config(format!(
                "model.mllm.max_context {} cannot hold {cells} grid tokens and an instruction",
                self.model.mllm.max_context
            )));
        }
        if let Some(s) = &self.scorer {
            if s.command.is_empty() {
                return Err(Error::Config("scorer.command is empty".into()));
            }
        }
        Ok(())
    }

    /// Fully resolved TOML, written beside every output.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: &toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
