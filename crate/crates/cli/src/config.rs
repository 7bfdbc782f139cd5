//! Run configuration: one JSON document with a section per command.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags. A config file may give any subset of fields; objects
//! are merged key by key into the defaults, so a partial `finetune` section
//! keeps the finetune defaults for the fields it leaves out. Unknown keys are
//! rejected.

use std::path::Path;

use duoflow::flow::{GuidanceConfig, TimeDistribution};
use duoflow::model::{FusionStrategy, ModelConfig};
use duoflow::rng::SeedRng;
use duoflow::trainer::{AdamConfig, Stage, TrainConfig};
use duoflow::world::dataset::DataConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub diagnose: DiagnoseSection,
}

/// Branch pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Target step count; 0 writes the starting checkpoint unchanged.
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub optimizer: AdamConfig,
    pub time: TimeDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub fusion: FusionStrategy,
    /// Train only the bridges and fusion module.
    pub bridges_only: bool,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub optimizer: AdamConfig,
    pub time: TimeDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    /// Euler steps K.
    pub steps: usize,
    pub cfg_scale: f64,
    /// Samples per condition when no assets are named.
    pub count: usize,
    /// Latents integrated together.
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub extractor_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    /// Held-out assets to score; 0 takes the whole test split.
    pub assets: usize,
    pub steps: usize,
    pub cfg_scale: f64,
    pub batch: usize,
    pub extractor_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pre = TrainConfig::default();
        let fine = TrainConfig::finetune();
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection {
                steps: pre.steps,
                batch: pre.batch,
                lr: pre.lr,
                dropout: pre.dropout,
                checkpoint_every: pre.checkpoint_every,
                log_every: pre.log_every,
                optimizer: pre.optimizer,
                time: pre.time,
            },
            finetune: FinetuneSection {
                fusion: FusionStrategy::Sim,
                bridges_only: false,
                steps: fine.steps,
                batch: fine.batch,
                lr: fine.lr,
                dropout: fine.dropout,
                checkpoint_every: fine.checkpoint_every,
                log_every: fine.log_every,
                optimizer: fine.optimizer,
                time: fine.time,
            },
            sample: SampleSection {
                steps: duoflow::flow::DEFAULT_STEPS,
                cfg_scale: duoflow::flow::DEFAULT_GUIDANCE,
                count: 1,
                batch: 32,
            },
            eval: EvalSection { extractor_seed: 0 },
            diagnose: DiagnoseSection {
                assets: 0,
                steps: duoflow::flow::DEFAULT_STEPS,
                cfg_scale: duoflow::flow::DEFAULT_GUIDANCE,
                batch: 32,
                extractor_seed: 0,
            },
        }
    }
}

/// Recursive merge of `over` into `base`. Tagged enums (objects with a
/// `kind` key) replace rather than merge, so switching variants does not
/// inherit the old variant's fields.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Named random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    InitImage = 1,
    InitText = 2,
    TrainImage = 3,
    TrainText = 4,
    InitBundle = 5,
    Finetune = 6,
    Sample = 7,
    Diagnose = 8,
}

impl RunConfig {
    /// Parse a (possibly partial) config document over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        if !over.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        merge(&mut base, over);
        serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stream(&self, s: Stream) -> u64 {
        SeedRng::new(self.seed).split(s as u64).seed()
    }

    /// Every section is checked, whichever command runs.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: duoflow::Error| CliError::Config(e.to_string());
        self.data.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        let mut pre = self.pretrain_config(Stage::PretrainImg);
        pre.steps = pre.steps.max(1);
        pre.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        let mut fine = self.finetune_config();
        fine.steps = fine.steps.max(1);
        fine.validate().map_err(|e| CliError::Config(format!("finetune: {e}")))?;
        for (name, steps, scale, batch) in [
            ("sample", self.sample.steps, self.sample.cfg_scale, self.sample.batch),
            ("diagnose", self.diagnose.steps, self.diagnose.cfg_scale, self.diagnose.batch),
        ] {
            if steps == 0 || batch == 0 {
                return Err(CliError::Config(format!("{name}: steps and batch must be at least 1")));
            }
            GuidanceConfig::new(scale).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        }
        if self.sample.count == 0 {
            return Err(CliError::Config("sample: count must be at least 1".into()));
        }
        if self.model.grid != self.data.grid || self.model.image_size != self.data.image_size || self.model.image_patch != self.data.patch {
            return Err(CliError::Config("model grid, image_size and image_patch must match the data section".into()));
        }
        Ok(())
    }

    pub fn pretrain_config(&self, stage: Stage) -> TrainConfig {
        let t = &self.train;
        let stream = if stage == Stage::PretrainTxt { Stream::TrainText } else { Stream::TrainImage };
        TrainConfig {
            stage,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            dropout: t.dropout,
            seed: self.stream(stream),
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            optimizer: t.optimizer,
            time: t.time,
            bridges_only: false,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let t = &self.finetune;
        TrainConfig {
            stage: Stage::Joint,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            dropout: t.dropout,
            seed: self.stream(Stream::Finetune),
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            optimizer: t.optimizer,
            time: t.time,
            bridges_only: t.bridges_only,
        }
    }
}
