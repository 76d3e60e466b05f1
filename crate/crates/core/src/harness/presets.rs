use std::path::PathBuf;

use super::config::ExperimentConfig;
use super::run::FINAL_CKPT;
use crate::conditioning::Variant;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::train::TaskMix;

pub const PRESETS: [&str; 5] = ["variants4", "mix3", "speech2", "cfg_sweep", "mixgen"];

/// Guidance scales evaluated by the `cfg_sweep` preset.
pub const SWEEP_SCALES: [f64; 5] = [1.0, 1.5, 2.0, 3.0, 4.0];

/// A named group of runs, executed in order.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub experiments: Vec<ExperimentConfig>,
    /// Scales swept over each run's final checkpoint; empty for no sweep.
    pub sweep_scales: Vec<f64>,
}

fn experiment(preset: &str, id: &str, mix: TaskMix, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        experiment_id: id.to_string(),
        output_dir: Some(PathBuf::from(preset).join(id)),
        ..ExperimentConfig::default()
    };
    cfg.train.task_mix = mix;
    cfg.train.seed = seed;
    cfg.model.init_seed = seed;
    cfg
}

/// Builds preset `name` with every training and initialization seed set to `seed`.
pub fn preset(name: &str, seed: u64) -> Result<Preset> {
    let both = TaskMix::only(Task::V2S).with(Task::VisualTTS, 1.0);
    let mut sweep_scales = Vec::new();
    let experiments = match name {
        "variants4" => Variant::ALL
            .iter()
            .map(|&v| {
                let mut cfg = experiment(name, &v.to_string(), both, seed);
                cfg.model.variant = v;
                cfg
            })
            .collect(),
        "mix3" => [
            ("v2s", TaskMix::only(Task::V2S)),
            ("v2s_visual_tts", both),
            ("v2s_tts", TaskMix::only(Task::V2S).with(Task::TTS, 1.0)),
        ]
        .into_iter()
        .map(|(id, mix)| {
            let mut cfg = experiment(name, id, mix, seed);
            cfg.eval_tasks = vec![Task::V2S];
            cfg
        })
        .collect(),
        "speech2" => [
            ("visual_tts", TaskMix::only(Task::VisualTTS)),
            ("visual_tts_v2s", both),
        ]
        .into_iter()
        .map(|(id, mix)| {
            let mut cfg = experiment(name, id, mix, seed);
            cfg.eval_tasks = vec![Task::VisualTTS];
            cfg
        })
        .collect(),
        "cfg_sweep" => {
            sweep_scales = SWEEP_SCALES.to_vec();
            vec![experiment(name, "v2s_visual_tts", both, seed)]
        }
        "mixgen" => {
            let base = experiment(name, "base", both, seed);
            let mut tune = experiment(name, "mix_tune", both.with(Task::Mix, 1.0), seed);
            tune.init_checkpoint = Some(base.output_dir.clone().expect("preset dir").join(FINAL_CKPT));
            tune.train.total_steps /= 2;
            tune.train.warmup_steps = 0;
            tune.eval_every = tune.eval_every.min(tune.train.total_steps);
            tune.eval_tasks = vec![Task::Mix, Task::V2S, Task::VisualTTS];
            vec![base, tune]
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(Preset {
        name: name.to_string(),
        experiments,
        sweep_scales,
    })
}
