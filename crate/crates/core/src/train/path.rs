use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `x_t = (1 − t)·x0 + t·x1`: noise at `t = 0`, data at `t = 1`.
pub fn interpolate_path<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    x0.check_same(x1, "interpolate_path")?;
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::Contract(format!("path time {t:?} outside [0, 1]")));
    }
    let s = T::one() - t;
    let data = x0.data().iter().zip(x1.data()).map(|(&a, &b)| s * a + t * b).collect();
    Tensor::new(x0.shape(), data)
}

/// `d/dt x_t = x1 − x0`, independent of `t`.
pub fn target_velocity<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    x1.sub(x0)
}

/// Mean squared error over all elements.
pub fn fm_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.check_same(target, "fm_loss")?;
    let n = T::from_usize(pred.len()).expect("length fits");
    let sum: T = pred.data().iter().zip(target.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
    Ok(sum / n)
}

/// Recorded form of [`fm_loss`] for backpropagation.
pub fn fm_loss_var<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}
