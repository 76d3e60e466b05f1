use super::{sc, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max relative error between tape gradients and central differences for a
/// scalar function of one tensor.
///
/// Relative error per coordinate is `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn grad_check<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Same as [`grad_check`] over several inputs at once; the closure receives
/// one [`Var`] per input, in order.
pub fn grad_check_many<T, F>(mut f: F, inputs: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if eps < sc(1e-7) || eps > sc(1e-3) {
        return Err(Error::Contract(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps:?}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.param(t, 0))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.len()])
        })
        .collect();

    let mut eval = |probe: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check".into() });
        }
        Ok(v)
    };

    let two = sc::<T>(2.0);
    let floor = sc::<T>(1e-8);
    let mut worst = T::zero();
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let cd = (up - down) / (two * eps);
            let a = analytic[k][i];
            let denom = a.abs().max(cd.abs()).max(floor);
            worst = worst.max((a - cd).abs() / denom);
        }
    }
    Ok(worst)
}
