use rand::Rng;

use super::attention::{AttentionLayer, RopeSpec};
use super::layers::{Init, LayerNorm, Linear};
use super::params::{Ctx, ParamStore};
use crate::conditioning::Placed;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Pre-norm transformer block: self-attention, optional cross-attention, MLP.
#[derive(Debug, Clone)]
pub struct DitBlock {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionLayer,
    pub cross: Option<(LayerNorm, AttentionLayer)>,
    pub ln_mlp: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl DitBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        mlp_hidden: usize,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let ln_self = LayerNorm::new(store, &format!("{name}.ln_self"), d_model);
        let self_attn = AttentionLayer::new(store, &format!("{name}.self"), d_model, heads, rng);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), d_model),
                AttentionLayer::new(store, &format!("{name}.cross"), d_model, heads, rng),
            )
        });
        let ln_mlp = LayerNorm::new(store, &format!("{name}.ln_mlp"), d_model);
        let mlp_in = Linear::new(store, &format!("{name}.mlp.in"), d_model, mlp_hidden, true, Init::Scaled, rng);
        let mlp_out = Linear::new(store, &format!("{name}.mlp.out"), mlp_hidden, d_model, true, Init::Zero, rng);
        Self {
            ln_self,
            self_attn,
            cross,
            ln_mlp,
            mlp_in,
            mlp_out,
        }
    }

    /// `x += SelfAttn(LN(x)); x += CrossAttn(LN(x), ctx); x += MLP(LN(x))`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        positions: &[usize],
        cross_ctx: Option<&Placed>,
        rope_base: f64,
    ) -> Result<Var> {
        let h = self.ln_self.forward(ctx, x)?;
        let rope = RopeSpec {
            positions_q: positions,
            positions_kv: positions,
            base: rope_base,
        };
        let (a, _) = self.self_attn.forward(ctx, h, h, Some(rope))?;
        let mut x = ctx.tape.add(x, a)?;

        match (&self.cross, cross_ctx) {
            (Some((ln, attn)), Some(c)) => {
                let h = ln.forward(ctx, x)?;
                let rope = RopeSpec {
                    positions_q: positions,
                    positions_kv: &c.positions,
                    base: rope_base,
                };
                let (a, _) = attn.forward(ctx, h, c.tokens, Some(rope))?;
                x = ctx.tape.add(x, a)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Config("cross-attention block needs a condition context".into())),
            (None, Some(_)) => return Err(Error::Config("block has no cross-attention but got a context".into())),
        }

        let h = self.ln_mlp.forward(ctx, x)?;
        let h = self.mlp_in.forward(ctx, h)?;
        let h = ctx.tape.gelu(h)?;
        let h = self.mlp_out.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}
