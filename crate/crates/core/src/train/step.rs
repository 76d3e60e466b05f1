use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::optim::{lr_schedule, AdamW, AdamWConfig};
use super::path::{fm_loss_var, interpolate_path, target_velocity};
use crate::conditioning::drop_conditions;
use crate::data::{Synth, SyntheticSample, Task};
use crate::error::{Error, Result};
use crate::nn::{Ctx, VelocityModel};
use crate::tensor::{Tape, Tensor};

/// Sampling weights over tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskMix {
    pub v2s: f64,
    pub visual_tts: f64,
    pub tts: f64,
    pub mix: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self::only(Task::V2S)
    }
}

impl TaskMix {
    pub fn only(task: Task) -> Self {
        let mut m = Self {
            v2s: 0.0,
            visual_tts: 0.0,
            tts: 0.0,
            mix: 0.0,
        };
        *m.weight_mut(task) = 1.0;
        m
    }

    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::V2S => self.v2s,
            Task::VisualTTS => self.visual_tts,
            Task::TTS => self.tts,
            Task::Mix => self.mix,
        }
    }

    pub fn weight_mut(&mut self, task: Task) -> &mut f64 {
        match task {
            Task::V2S => &mut self.v2s,
            Task::VisualTTS => &mut self.visual_tts,
            Task::TTS => &mut self.tts,
            Task::Mix => &mut self.mix,
        }
    }

    pub fn with(mut self, task: Task, w: f64) -> Self {
        *self.weight_mut(task) = w;
        self
    }

    pub fn active(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|&t| self.weight(t) > 0.0).collect()
    }

    /// Active task names joined by `+`, e.g. `v2s+visual_tts`.
    pub fn id(&self) -> String {
        self.active().iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")
    }

    pub fn validate(&self) -> Result<()> {
        let w: Vec<f64> = Task::ALL.iter().map(|&t| self.weight(t)).collect();
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || !w.iter().any(|&x| x > 0.0) {
            return Err(Error::Config(format!(
                "train.task_mix weights must be nonnegative with at least one positive, got {w:?}"
            )));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Task {
        let dist = WeightedIndex::new(Task::ALL.iter().map(|&t| self.weight(t))).expect("validated weights");
        Task::ALL[dist.sample(rng)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub p_uncond_v: f64,
    pub p_uncond_p: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub task_mix: TaskMix,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_uncond_v: 0.1,
            p_uncond_p: 0.1,
            lr: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 8,
            task_mix: TaskMix::default(),
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_uncond_v", self.p_uncond_v), ("p_uncond_p", self.p_uncond_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and nonnegative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        self.task_mix.validate()
    }
}

/// One optimizer step over `batch`. Each item draws `t`, its noise and its
/// condition dropout from `rng`; when both conditions drop, the speaker does too.
pub fn train_step(
    model: &mut VelocityModel<f32>,
    synth: &Synth,
    batch: &[SyntheticSample],
    opt: &mut AdamW<f32>,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut impl Rng,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch is empty".into()));
    }
    let numeric = |e: Error| match e {
        Error::NonFinite { op } => Error::NumericAtStep {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    };

    let mut tape = Tape::new();
    let loss = {
        let mut ctx = Ctx::train(&mut tape, &model.params);
        let mut total = None;
        for sample in batch {
            let t: f32 = rng.gen();
            let x1 = &sample.latent;
            let x0 = Tensor::from_fn(x1.shape(), || rng.sample(StandardNormal));
            let x_t = interpolate_path(&x0, x1, t)?;
            let target = target_velocity(&x0, x1)?;
            let mut bundle = drop_conditions(synth.bundle(sample)?, cfg.p_uncond_v, cfg.p_uncond_p, rng);
            if bundle.video_null && bundle.phoneme_null {
                bundle.speaker = None;
            }
            let pred = model.forward(&mut ctx, &x_t, t, &bundle).map_err(numeric)?;
            let target = ctx.constant(target);
            let l = fm_loss_var(ctx.tape, pred, target).map_err(numeric)?;
            total = Some(match total {
                None => l,
                Some(acc) => ctx.tape.add(acc, l).map_err(numeric)?,
            });
        }
        let total = total.expect("nonempty batch");
        ctx.tape.scale(total, 1.0 / batch.len() as f32).map_err(numeric)?
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NumericAtStep {
            step,
            detail: format!("loss is {value}"),
        });
    }
    tape.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&tape);
    opt.update(&mut model.params, lr_schedule(step, cfg.warmup_steps, cfg.lr));
    Ok(value)
}

/// Owns the model, optimizer and random stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: VelocityModel<f32>,
    pub synth: Synth,
    pub opt: AdamW<f32>,
    pub cfg: TrainConfig,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: VelocityModel<f32>, synth: Synth, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.params, cfg.optimizer);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            synth,
            opt,
            cfg,
            step: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Result<Vec<SyntheticSample>> {
        (0..self.cfg.batch_size)
            .map(|_| {
                let task = self.cfg.task_mix.draw(&mut self.rng);
                self.synth.sample(task, &mut self.rng)
            })
            .collect()
    }

    /// Draws a batch and applies one update; returns the batch loss.
    pub fn step(&mut self) -> Result<f32> {
        let batch = self.next_batch()?;
        let loss = train_step(
            &mut self.model,
            &self.synth,
            &batch,
            &mut self.opt,
            &self.cfg,
            self.step,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(loss)
    }
}
