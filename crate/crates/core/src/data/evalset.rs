//! On-disk evaluation sets: one tensor file per item plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{SynthConfig, SyntheticSample, Task};
use crate::conditioning::PhonemeTrack;
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetManifest {
    pub task: Task,
    pub seed: u64,
    pub dict_seed: u64,
    pub data: SynthConfig,
    pub items: Vec<ItemRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub file: String,
    pub task: Task,
    pub rng_seed: u64,
    pub track: Option<PhonemeTrack>,
    pub speaker_id: Option<usize>,
    pub event_times: Vec<usize>,
    pub event_classes: Vec<usize>,
}

pub fn save_eval_set(dir: &Path, data: &SynthConfig, task: Task, seed: u64, items: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(items.len());
    for (i, s) in items.iter().enumerate() {
        let file = format!("item_{i:05}.bin");
        save_checkpoint(&dir.join(&file), &[("video_raw", &s.video_raw), ("latent", &s.latent)])?;
        records.push(ItemRecord {
            file,
            task: s.task,
            rng_seed: s.rng_seed,
            track: s.track.clone(),
            speaker_id: s.speaker_id,
            event_times: s.event_times.clone(),
            event_classes: s.event_classes.clone(),
        });
    }
    let manifest = EvalSetManifest {
        task,
        seed,
        dict_seed: data.dict_seed,
        data: data.clone(),
        items: records,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_eval_set(dir: &Path) -> Result<(EvalSetManifest, Vec<SyntheticSample>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EvalSetManifest = serde_json::from_str(&text)?;
    let mut items = Vec::with_capacity(manifest.items.len());
    for r in &manifest.items {
        let mut tensors = load_checkpoint::<f32>(&dir.join(&r.file))?;
        let mut take = |name: &str| {
            tensors
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| tensors.swap_remove(i).1)
                .ok_or_else(|| Error::Format(format!("{}: missing tensor `{name}`", r.file)))
        };
        let latent = take("latent")?;
        let video_raw = take("video_raw")?;
        items.push(SyntheticSample {
            task: r.task,
            video_raw,
            track: r.track.clone(),
            speaker_id: r.speaker_id,
            latent,
            event_times: r.event_times.clone(),
            event_classes: r.event_classes.clone(),
            rng_seed: r.rng_seed,
        });
    }
    Ok((manifest, items))
}
