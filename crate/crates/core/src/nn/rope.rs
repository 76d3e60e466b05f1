//! 1D rotary position embedding.
//!
//! The differentiable kernel lives on the tape ([`Tape::rope`]); this module
//! adds the standalone entry point used outside a training graph.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotates `x: [seq, heads, head_dim]` by per-row positions.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::dim("rope_apply", format!("expected [seq, heads, head_dim], got {:?}", x.shape())));
    }
    let head_dim = x.shape()[2];
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.rope(v, positions, head_dim, base)?;
    Ok(tape.value(out).clone())
}
