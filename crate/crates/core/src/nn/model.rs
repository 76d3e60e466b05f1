use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::block::DitBlock;
use super::layers::{Init, LayerNorm, Linear};
use super::params::{Ctx, ParamStore};
use super::rope::DEFAULT_ROPE_BASE;
use crate::conditioning::{ConcatAxis, ConditionBundle, ConditionEncoder, Variant};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Latent frames (`T_a`).
    pub latent_len: usize,
    /// Latent channels (`D_a`).
    pub latent_dim: usize,
    pub d_v: usize,
    pub d_p: usize,
    pub concat_axis: ConcatAxis,
    pub rope_base: f64,
    pub n_speakers: usize,
    pub mlp_ratio: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CrossV,
            depth: 4,
            d_model: 128,
            heads: 4,
            latent_len: 64,
            latent_dim: 8,
            d_v: 16,
            d_p: 8,
            concat_axis: ConcatAxis::Channel,
            rope_base: DEFAULT_ROPE_BASE,
            n_speakers: 4,
            mlp_ratio: 4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if !(self.d_model / self.heads).is_multiple_of(2) {
            return fail(format!("head_dim {} must be even for rotary embedding", self.d_model / self.heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail("d_model must be even for the timestep table".into());
        }
        if self.depth == 0 || self.latent_len == 0 || self.latent_dim == 0 || self.d_v == 0 || self.d_p == 0 {
            return fail("depth and all dimensions must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Copies every data-determined dimension from `data`.
    pub fn fitted_to(mut self, data: &SynthConfig) -> Self {
        self.latent_len = data.latent_len;
        self.latent_dim = data.latent_dim;
        self.d_v = data.d_v;
        self.d_p = data.d_p;
        self.n_speakers = data.n_speakers;
        self
    }

    /// Fails when the model cannot consume samples drawn under `data`.
    pub fn check_against(&self, data: &SynthConfig) -> Result<()> {
        let pairs = [
            ("latent_len", self.latent_len, data.latent_len),
            ("latent_dim", self.latent_dim, data.latent_dim),
            ("d_v", self.d_v, data.d_v),
            ("d_p", self.d_p, data.d_p),
            ("n_speakers", self.n_speakers, data.n_speakers),
        ];
        for (name, m, d) in pairs {
            if m != d {
                return Err(Error::Config(format!("model.{name} = {m} does not match data.{name} = {d}")));
            }
        }
        Ok(())
    }
}

/// Sinusoidal table followed by a two-layer MLP; one `d_model` token per `t`.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    freqs: Vec<f64>,
    lin1: Linear,
    lin2: Linear,
}

impl TimestepEmbedding {
    const TIME_SCALE: f64 = 1000.0;
    const MAX_PERIOD: f64 = 10_000.0;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_model: usize, rng: &mut impl Rng) -> Self {
        let half = d_model / 2;
        let freqs = (0..half)
            .map(|i| (-(Self::MAX_PERIOD.ln()) * i as f64 / half as f64).exp())
            .collect();
        Self {
            freqs,
            lin1: Linear::new(store, "time.lin1", d_model, d_model, true, Init::Scaled, rng),
            lin2: Linear::new(store, "time.lin2", d_model, d_model, true, Init::Scaled, rng),
        }
    }

    /// `[cos(1000·t·f_i)…, sin(1000·t·f_i)…]`
    pub fn table<T: Scalar>(&self, t: f64) -> Tensor<T> {
        let arg = |f: f64| Self::TIME_SCALE * t * f;
        let data = self
            .freqs
            .iter()
            .map(|&f| sc::<T>(arg(f).cos()))
            .chain(self.freqs.iter().map(|&f| sc::<T>(arg(f).sin())))
            .collect();
        Tensor::new(&[1, 2 * self.freqs.len()], data).expect("table shape")
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, t: T) -> Result<Var> {
        let e = ctx.constant(self.table(t.to_f64().expect("finite t")));
        let h = self.lin1.forward(ctx, e)?;
        let h = ctx.tape.gelu(h)?;
        self.lin2.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: ConditionEncoder,
    in_proj: Linear,
    time: TimestepEmbedding,
    blocks: Vec<DitBlock>,
    final_ln: LayerNorm,
    out_proj: Linear,
}

/// The velocity network `v(x_t, c, t)`.
#[derive(Debug, Clone)]
pub struct VelocityModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> VelocityModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let encoder = ConditionEncoder::new(&mut store, &config, &mut rng);
        let in_width = config.latent_dim + encoder.in_context_channels();
        let in_proj = Linear::new(&mut store, "in_proj", in_width, d, true, Init::Scaled, &mut rng);
        let time = TimestepEmbedding::new(&mut store, d, &mut rng);
        let blocks = (0..config.depth)
            .map(|i| {
                DitBlock::new(
                    &mut store,
                    &format!("block{i}"),
                    d,
                    config.heads,
                    d * config.mlp_ratio,
                    config.variant.uses_cross_attention(),
                    &mut rng,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "final_ln", d);
        let out_proj = Linear::new(&mut store, "out_proj", d, config.latent_dim, true, Init::Scaled, &mut rng);
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                encoder,
                in_proj,
                time,
                blocks,
                final_ln,
                out_proj,
            },
        })
    }

    /// Same architecture with parameters converted to `U`.
    pub fn cast<U: Scalar>(&self) -> VelocityModel<U> {
        VelocityModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Overwrites every parameter with `N(0, std²)` draws.
    pub fn randomize(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.params.tensors_mut() {
            for v in t.data_mut() {
                *v = sc(std * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }

    pub fn blocks(&self) -> &[DitBlock] {
        &self.layout.blocks
    }

    pub fn encoder(&self) -> &ConditionEncoder {
        &self.layout.encoder
    }

    /// Records one forward pass and returns the `[T_a, D_a]` velocity.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x_t: &Tensor<T>, t: T, bundle: &ConditionBundle<T>) -> Result<Var> {
        let cfg = &self.config;
        if x_t.shape() != [cfg.latent_len, cfg.latent_dim] {
            return Err(Error::dim(
                "model_forward",
                format!("x_t {:?}, expected [{}, {}]", x_t.shape(), cfg.latent_len, cfg.latent_dim),
            ));
        }
        bundle.check_aligned(cfg.latent_len, cfg.d_v, cfg.d_p)?;
        let l = &self.layout;

        let assembled = l.encoder.assemble(ctx, bundle)?;
        let input = match &assembled.in_context {
            Some(c) => concat_channels(x_t, c),
            None => x_t.clone(),
        };
        let input = ctx.constant(input);
        let h = l.in_proj.forward(ctx, input)?;

        let t_tok = l.time.forward(ctx, t)?;
        let mut parts = vec![t_tok];
        let mut positions = vec![0usize];
        for p in &assembled.prefixes {
            parts.push(p.tokens);
            positions.extend_from_slice(&p.positions);
        }
        let n_prefix = positions.len();
        parts.push(h);
        positions.extend(0..cfg.latent_len);
        let mut x = ctx.tape.concat_rows(&parts)?;

        for block in &l.blocks {
            x = block.forward(ctx, x, &positions, assembled.cross.as_ref(), cfg.rope_base)?;
        }

        let x = ctx.tape.slice_rows(x, n_prefix, cfg.latent_len)?;
        let x = l.final_ln.forward(ctx, x)?;
        l.out_proj.forward(ctx, x)
    }

    /// Inference-only forward.
    pub fn velocity(&self, x_t: &Tensor<T>, t: T, bundle: &ConditionBundle<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::infer(&mut tape, &self.params);
        let v = self.forward(&mut ctx, x_t, t, bundle)?;
        Ok(tape.value(v).clone())
    }

    /// Output of the input and final projections alone, skipping every block.
    pub fn projection_path(&self, x_t: &Tensor<T>, bundle: &ConditionBundle<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::infer(&mut tape, &self.params);
        let l = &self.layout;
        let assembled = l.encoder.assemble(&mut ctx, bundle)?;
        let input = match &assembled.in_context {
            Some(c) => concat_channels(x_t, c),
            None => x_t.clone(),
        };
        let input = ctx.constant(input);
        let h = l.in_proj.forward(&mut ctx, input)?;
        let h = l.final_ln.forward(&mut ctx, h)?;
        let out = l.out_proj.forward(&mut ctx, h)?;
        Ok(tape.value(out).clone())
    }
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let rows = a.rows();
    let (wa, wb) = (a.last_dim(), b.last_dim());
    let mut data = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::new(&[rows, wa + wb], data).expect("concat shape")
}
