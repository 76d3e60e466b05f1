//! One-dimensional flow matching between two Gaussians with a small MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::optim::{lr_schedule, AdamW, AdamWConfig};
use super::path::fm_loss_var;
use crate::error::{Error, Result};
use crate::nn::layers::{Init, Linear};
use crate::nn::{Ctx, ParamStore};
use crate::sampler::VelocityField;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Source `N(0, 1)` is fixed; the target is `N(target_mean, target_std²)`.
    pub target_mean: f64,
    pub target_std: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 3000,
            batch_size: 256,
            lr: 3e-3,
            warmup_steps: 100,
            seed: 0,
            target_mean: 2.0,
            target_std: 0.5,
        }
    }
}

/// `v(x, t) = W2 · gelu(W1 · [x, t] + b1) + b2`
#[derive(Debug, Clone)]
pub struct ToyVelocity {
    pub params: ParamStore<f64>,
    l1: Linear,
    l2: Linear,
}

impl ToyVelocity {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let l1 = Linear::new(&mut params, "l1", 2, hidden, true, Init::Scaled, &mut rng);
        let l2 = Linear::new(&mut params, "l2", hidden, 1, true, Init::Scaled, &mut rng);
        Self { params, l1, l2 }
    }

    fn forward(&self, ctx: &mut Ctx<'_, f64>, x: &[f64], t: &[f64]) -> Result<crate::tensor::Var> {
        let rows: Vec<f64> = x.iter().zip(t).flat_map(|(&a, &b)| [a, b]).collect();
        let input = ctx.constant(Tensor::new(&[x.len(), 2], rows)?);
        let h = self.l1.forward(ctx, input)?;
        let h = ctx.tape.gelu(h)?;
        self.l2.forward(ctx, h)
    }

    /// Velocities at paired points.
    pub fn eval(&self, x: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::infer(&mut tape, &self.params);
        let v = self.forward(&mut ctx, x, t)?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// Treats every element of `x` as an independent 1-D particle.
impl VelocityField<f64> for ToyVelocity {
    type Cond = ();

    fn velocity(&self, x: &Tensor<f64>, t: f64, _: &()) -> Result<Tensor<f64>> {
        let ts = vec![t; x.len()];
        Tensor::new(x.shape(), self.eval(x.data(), &ts)?)
    }

    fn null_cond(&self, _: &()) {}
}

/// Trains the toy field; returns it with the per-step losses.
pub fn train_toy(cfg: &ToyConfig) -> Result<(ToyVelocity, Vec<f64>)> {
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Config("toy batch_size and hidden must be positive".into()));
    }
    let mut model = ToyVelocity::new(cfg.hidden, cfg.seed);
    let mut opt = AdamW::new(&model.params, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let source = Normal::new(0.0, 1.0).expect("valid");
    let target = Normal::new(cfg.target_mean, cfg.target_std)
        .map_err(|e| Error::Config(format!("toy target: {e}")))?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let n = cfg.batch_size;
        let mut xs = Vec::with_capacity(n);
        let mut ts = Vec::with_capacity(n);
        let mut us = Vec::with_capacity(n);
        for _ in 0..n {
            let x0 = source.sample(&mut rng);
            let x1 = target.sample(&mut rng);
            let t: f64 = rng.gen();
            xs.push((1.0 - t) * x0 + t * x1);
            ts.push(t);
            us.push(x1 - x0);
        }
        let mut tape = Tape::new();
        let loss = {
            let mut ctx = Ctx::train(&mut tape, &model.params);
            let pred = model.forward(&mut ctx, &xs, &ts)?;
            let u = ctx.constant(Tensor::new(&[n, 1], us)?);
            fm_loss_var(ctx.tape, pred, u)?
        };
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NumericAtStep { step, detail: format!("toy loss is {value}") });
        }
        tape.backward(loss)?;
        model.params.zero_grad();
        model.params.accumulate_grads(&tape);
        opt.update(&mut model.params, lr_schedule(step, cfg.warmup_steps, cfg.lr));
        losses.push(value);
    }
    Ok((model, losses))
}
