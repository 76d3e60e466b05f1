use rand::Rng;

use super::params::{Ctx, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{sc, Scalar, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// How a linear layer starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 1/fan_in)` weights, zero bias.
    Scaled,
    /// All zeros; used for residual output projections.
    Zero,
}

/// `x · W + b`. The weight is stored under `name`, the bias under `name.bias`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = match init {
            Init::Scaled => store.add_normal(name, &[fan_in, fan_out], (fan_in as f64).powf(-0.5), rng),
            Init::Zero => store.add_zeros(name, &[fan_in, fan_out]),
        };
        let b = bias.then(|| store.add_zeros(format!("{name}.bias"), &[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), &[dim]),
            bias: store.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gain);
        let b = ctx.p(self.bias);
        ctx.tape.layer_norm(x, g, b, sc(LN_EPS))
    }
}
