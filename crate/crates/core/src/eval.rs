//! Generation and scoring over a held-out synthetic set.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::data::{score, MetricsReport, Synth, SyntheticSample, Task};
use crate::error::{Error, Result};
use crate::nn::VelocityModel;
use crate::sampler::{initial_noise, integrate, SamplerConfig};
use crate::tensor::Tensor;

/// Noise seed of item `index` under sampler seed `seed`; shared across guidance scales.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Stable digest of a tensor's bytes, used to confirm paired noise.
pub fn tensor_hash(t: &Tensor<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    t.shape().hash(&mut h);
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// A report together with the hash of every item's start noise.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub noise_hashes: Vec<u64>,
    pub generated: Vec<Option<Tensor<f32>>>,
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NumericAtStep { .. } | Error::NonFinite { .. } | Error::Stiffness { .. })
}

/// One generation per item, then every metric against the items' ground truth.
/// Items whose solve fails numerically are counted and left out of the averages.
pub fn evaluate(
    model: &VelocityModel<f32>,
    synth: &Synth,
    sampler: &SamplerConfig,
    items: &[SyntheticSample],
    task: Task,
) -> Result<Evaluation> {
    sampler.validate()?;
    if let Some(bad) = items.iter().find(|s| s.task != task) {
        return Err(Error::Config(format!("evaluation set for {task} contains a {} item", bad.task)));
    }
    let mut generated = Vec::with_capacity(items.len());
    let mut noise_hashes = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let x0 = initial_noise::<f32>(item.latent.shape(), item_seed(sampler.seed, i));
        noise_hashes.push(tensor_hash(&x0));
        let bundle = synth.bundle(item)?;
        match integrate(model, &x0, &bundle, sampler) {
            Ok((x, _)) => generated.push(Some(x)),
            Err(e) if is_numeric(&e) => generated.push(None),
            Err(e) => return Err(e),
        }
    }
    let s = score(items, &generated, &synth.dict)?;
    let report = MetricsReport {
        toy_fad: s.toy_fad,
        onset_acc: s.onset_acc,
        token_error_rate: s.token_error_rate,
        cond_adherence: s.cond_adherence,
        step: 0,
        variant: model.config.variant.to_string(),
        task,
        task_mix: String::new(),
        cfg_scale: sampler.cfg_scale,
        n_items: s.n_items,
        failures: s.failures,
    };
    Ok(Evaluation {
        report,
        noise_hashes,
        generated,
    })
}
