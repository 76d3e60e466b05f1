use rand::Rng;

use super::layers::{Init, Linear};
use super::params::{Ctx, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tape, Var};

/// Per-head attention result before the output projection.
pub struct AttentionOutput {
    pub out: Var,
    /// Softmax weights `[Lq, Lkv]`, one per head.
    pub weights: Vec<Var>,
}

/// Rotary settings shared by query and key.
#[derive(Debug, Clone, Copy)]
pub struct RopeSpec<'p> {
    pub positions_q: &'p [usize],
    pub positions_kv: &'p [usize],
    pub base: f64,
}

/// Multi-head scaled dot-product attention over already projected
/// `q: [Lq, d]`, `k, v: [Lkv, d]` with `d = heads · head_dim`.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    rope: Option<RopeSpec<'_>>,
) -> Result<AttentionOutput> {
    let (lk, d) = (tape.shape(k)[0], tape.shape(k)[1]);
    if tape.shape(v)[0] != lk {
        return Err(Error::dim(
            "attention",
            format!("{lk} keys but {} values", tape.shape(v)[0]),
        ));
    }
    if tape.shape(q)[1] != d || tape.shape(v)[1] != d {
        return Err(Error::dim("attention", "q, k, v widths differ"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let head_dim = d / heads;
    let (q, k) = match rope {
        Some(r) => (
            tape.rope(q, r.positions_q, head_dim, r.base)?,
            tape.rope(k, r.positions_kv, head_dim, r.base)?,
        ),
        None => (q, k),
    };
    let scale = sc::<T>((head_dim as f64).powf(-0.5));
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * head_dim, head_dim)?,
                tape.slice_cols(k, h * head_dim, head_dim)?,
                tape.slice_cols(v, h * head_dim, head_dim)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale)?;
        let w = tape.softmax(logits, 1)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(AttentionOutput { out, weights })
}

/// Projections of one attention sublayer. The output projection starts at zero.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.Wq"), d_model, d_model, false, Init::Scaled, rng),
            wk: Linear::new(store, &format!("{name}.Wk"), d_model, d_model, false, Init::Scaled, rng),
            wv: Linear::new(store, &format!("{name}.Wv"), d_model, d_model, false, Init::Scaled, rng),
            wo: Linear::new(store, &format!("{name}.Wo"), d_model, d_model, false, Init::Zero, rng),
            heads,
        }
    }

    /// Attends from `x` to `context` (pass `x` again for self-attention).
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        context: Var,
        rope: Option<RopeSpec<'_>>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.wq.forward(ctx, x)?;
        let k = self.wk.forward(ctx, context)?;
        let v = self.wv.forward(ctx, context)?;
        let att = attention(ctx.tape, q, k, v, self.heads, rope)?;
        Ok((self.wo.forward(ctx, att.out)?, att.weights))
    }

    /// Pre-softmax logits of every head after rotary embedding.
    pub fn logits<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        context: Var,
        rope: RopeSpec<'_>,
    ) -> Result<Vec<Var>> {
        let q = self.wq.forward(ctx, x)?;
        let k = self.wk.forward(ctx, context)?;
        let d = ctx.tape.shape(q)[1];
        let head_dim = d / self.heads;
        let q = ctx.tape.rope(q, rope.positions_q, head_dim, rope.base)?;
        let k = ctx.tape.rope(k, rope.positions_kv, head_dim, rope.base)?;
        (0..self.heads)
            .map(|h| {
                let qh = ctx.tape.slice_cols(q, h * head_dim, head_dim)?;
                let kh = ctx.tape.slice_cols(k, h * head_dim, head_dim)?;
                ctx.tape.matmul_nt(qh, kh)
            })
            .collect()
    }
}
