use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{DeserializeOwned, Deserializer, Error as _};
use serde::{Deserialize, Serialize};

use crate::data::{SynthConfig, Task};
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::sampler::{default_cfg_scale, SamplerConfig};
use crate::train::TrainConfig;

/// Everything one training run needs. Paths are relative to the runner's output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    /// Run directory; defaults to `experiment_id`.
    pub output_dir: Option<PathBuf>,
    #[serde(deserialize_with = "model_over_default")]
    pub model: ModelConfig,
    pub data: SynthConfig,
    #[serde(deserialize_with = "train_over_default")]
    pub train: TrainConfig,
    #[serde(deserialize_with = "sampler_over_default")]
    pub sampler: SamplerConfig,
    /// Evaluate each task at its default guidance scale instead of `sampler.cfg_scale`.
    pub per_task_guidance: bool,
    /// Evaluate every this many steps; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_set_size: usize,
    pub eval_seed: u64,
    /// Tasks to evaluate; empty means the active tasks of the training mix.
    pub eval_tasks: Vec<Task>,
    /// Training examples per nominal epoch, recorded for step/epoch conversion.
    pub samples_per_epoch: usize,
    /// Parameters to start from instead of the seeded initialization.
    pub init_checkpoint: Option<PathBuf>,
}

/// Reads a JSON object as a patch over `base`, one level deep, so a partial
/// section keeps the experiment defaults rather than the section type's own.
fn overlay<'de, D: Deserializer<'de>, T: Serialize + DeserializeOwned>(base: T, d: D) -> std::result::Result<T, D::Error> {
    let patch = serde_json::Value::deserialize(d)?;
    let mut value = serde_json::to_value(base).map_err(D::Error::custom)?;
    match (&mut value, patch) {
        (serde_json::Value::Object(v), serde_json::Value::Object(p)) => v.extend(p),
        (v, p) => *v = p,
    }
    serde_json::from_value(value).map_err(D::Error::custom)
}

fn model_over_default<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    overlay(ExperimentConfig::default().model, d)
}

fn train_over_default<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    overlay(ExperimentConfig::default().train, d)
}

fn sampler_over_default<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SamplerConfig, D::Error> {
    overlay(ExperimentConfig::default().sampler, d)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = SynthConfig::default();
        let model = ModelConfig {
            depth: 2,
            d_model: 32,
            heads: 4,
            mlp_ratio: 2,
            ..ModelConfig::default()
        }
        .fitted_to(&data);
        Self {
            experiment_id: "run".into(),
            output_dir: None,
            model,
            data,
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 16,
                total_steps: 600,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            per_task_guidance: true,
            eval_every: 100,
            eval_set_size: 32,
            eval_seed: 1000,
            eval_tasks: Vec::new(),
            samples_per_epoch: 1024,
            init_checkpoint: None,
        }
    }
}

pub(crate) fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !is_safe_id(&self.experiment_id) {
            return fail(format!(
                "experiment_id {:?} must be nonempty and use only ASCII letters, digits, '_', '-' and '.'",
                self.experiment_id
            ));
        }
        if let Some(dir) = &self.output_dir {
            if dir.is_absolute() || dir.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return fail(format!("output_dir {} must stay inside the output root", dir.display()));
            }
        }
        self.model.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("model: {m}")),
            other => other,
        })?;
        self.data.validate()?;
        self.model.check_against(&self.data)?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.eval_every > self.train.total_steps {
            return fail(format!(
                "eval_every = {} exceeds train.total_steps = {}",
                self.eval_every, self.train.total_steps
            ));
        }
        if self.eval_every > 0 && self.eval_set_size < 2 {
            return fail(format!("eval_set_size must be at least 2, got {}", self.eval_set_size));
        }
        Ok(())
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(self.output_dir.clone().unwrap_or_else(|| PathBuf::from(&self.experiment_id)))
    }

    pub fn eval_tasks(&self) -> Vec<Task> {
        if self.eval_tasks.is_empty() {
            self.train.task_mix.active()
        } else {
            self.eval_tasks.clone()
        }
    }

    /// Sampler settings used when evaluating `task`.
    pub fn eval_sampler(&self, task: Task) -> SamplerConfig {
        let mut s = self.sampler.clone();
        if self.per_task_guidance {
            s.cfg_scale = default_cfg_scale(task);
        }
        s
    }

    /// Parses and validates a JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seeds that determine a run, spelled out for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub init: u64,
    pub dict: u64,
    pub eval: u64,
    pub sampler: u64,
}

/// Written next to the checkpoints: the resolved config plus derived bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub task_mix_id: String,
    pub eval_tasks: Vec<Task>,
    pub samples_per_epoch: usize,
    pub total_epochs: f64,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        let epochs = if config.samples_per_epoch == 0 {
            0.0
        } else {
            (config.train.total_steps * config.train.batch_size) as f64 / config.samples_per_epoch as f64
        };
        Self {
            config: config.clone(),
            seeds: Seeds {
                train: config.train.seed,
                init: config.model.init_seed,
                dict: config.data.dict_seed,
                eval: config.eval_seed,
                sampler: config.sampler.seed,
            },
            task_mix_id: config.train.task_mix.id(),
            eval_tasks: config.eval_tasks(),
            samples_per_epoch: config.samples_per_epoch,
            total_epochs: epochs,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
