//! ODE integration of a learned velocity field from noise at `t = 0` to data
//! at `t = 1`, with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionBundle;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::VelocityModel;
use crate::tensor::{sc, Scalar, Tensor};

/// Anything that maps `(x, t, condition)` to a velocity.
pub trait VelocityField<T: Scalar> {
    type Cond;

    fn velocity(&self, x: &Tensor<T>, t: T, cond: &Self::Cond) -> Result<Tensor<T>>;

    /// The `∅` condition paired with `cond`.
    fn null_cond(&self, cond: &Self::Cond) -> Self::Cond;
}

impl<T: Scalar> VelocityField<T> for VelocityModel<T> {
    type Cond = ConditionBundle<T>;

    fn velocity(&self, x: &Tensor<T>, t: T, cond: &ConditionBundle<T>) -> Result<Tensor<T>> {
        VelocityModel::velocity(self, x, t, cond)
    }

    fn null_cond(&self, cond: &ConditionBundle<T>) -> ConditionBundle<T> {
        cond.null()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
    Dopri5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: Method,
    /// Step count for the fixed-step methods.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            steps: 16,
            rtol: 1e-4,
            atol: 1e-5,
            cfg_scale: default_cfg_scale(Task::V2S),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("sampler.rtol and sampler.atol must be positive".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config("sampler.cfg_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Inference guidance scale per task.
pub fn default_cfg_scale(task: Task) -> f64 {
    match task {
        Task::V2S => 3.0,
        _ => 1.5,
    }
}

/// `v(∅) + γ (v(c) − v(∅))`. One pass at `γ = 1` (conditional) and `γ = 0`
/// (unconditional), so both identities hold bitwise.
pub fn cfg_velocity<T: Scalar, F: VelocityField<T>>(
    field: &F,
    x: &Tensor<T>,
    t: T,
    cond: &F::Cond,
    gamma: f64,
) -> Result<Tensor<T>> {
    if gamma == 1.0 {
        return field.velocity(x, t, cond);
    }
    let null = field.null_cond(cond);
    let v_null = field.velocity(x, t, &null)?;
    if gamma == 0.0 {
        return Ok(v_null);
    }
    let v_cond = field.velocity(x, t, cond)?;
    let diff = v_cond.sub(&v_null)?;
    v_null.axpy(sc(gamma), &diff)
}

fn finite<T: Scalar>(x: Tensor<T>, step: usize) -> Result<Tensor<T>> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NumericAtStep {
            step,
            detail: "sampler state is not finite".into(),
        })
    }
}

/// Fixed-step Euler, midpoint or classic RK4 over `[0, 1]`.
pub fn integrate_fixed<T: Scalar, F: VelocityField<T>>(
    field: &F,
    x0: &Tensor<T>,
    cond: &F::Cond,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let g = cfg.cfg_scale;
    let f = |x: &Tensor<T>, t: T| cfg_velocity(field, x, t, cond, g);
    let h: T = sc(1.0 / cfg.steps as f64);
    let half = h * sc(0.5);
    let mut x = x0.clone();
    for i in 0..cfg.steps {
        let t: T = sc(i as f64 / cfg.steps as f64);
        x = match cfg.method {
            Method::Euler => x.axpy(h, &f(&x, t)?)?,
            Method::Midpoint => {
                let k1 = f(&x, t)?;
                let mid = x.axpy(half, &k1)?;
                x.axpy(h, &f(&mid, t + half)?)?
            }
            Method::Rk4 => {
                let k1 = f(&x, t)?;
                let k2 = f(&x.axpy(half, &k1)?, t + half)?;
                let k3 = f(&x.axpy(half, &k2)?, t + half)?;
                let k4 = f(&x.axpy(h, &k3)?, t + h)?;
                let sixth = h / sc(6.0);
                let third = h / sc(3.0);
                x.axpy(sixth, &k1)?.axpy(third, &k2)?.axpy(third, &k3)?.axpy(sixth, &k4)?
            }
            Method::Dopri5 => return Err(Error::Config("dopri5 is adaptive; use integrate_dopri5".into())),
        };
        x = finite(x, i)?;
    }
    Ok(x)
}

/// Step counts of an adaptive solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub nfe: usize,
}

const MIN_STEP: f64 = 1e-10;
const MAX_ATTEMPTS: usize = 100_000;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
// PI controller exponents for a 5(4) pair.
const ALPHA: f64 = 0.7 / 5.0;
const BETA: f64 = 0.4 / 5.0;

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `A`).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration over `[0, 1]` with a PI step controller.
/// The first attempt spans the whole interval; the last step is clamped to land on `t = 1`.
pub fn integrate_dopri5<T: Scalar, F: VelocityField<T>>(
    field: &F,
    x0: &Tensor<T>,
    cond: &F::Cond,
    cfg: &SamplerConfig,
) -> Result<(Tensor<T>, SolveStats)> {
    cfg.validate()?;
    let g = cfg.cfg_scale;
    let mut stats = SolveStats::default();
    let eval = |x: &Tensor<T>, t: f64, stats: &mut SolveStats| {
        stats.nfe += 1;
        cfg_velocity(field, x, sc(t), cond, g)
    };

    let mut t = 0.0f64;
    let mut h = 1.0f64;
    let mut x = x0.clone();
    let mut k1 = eval(&x, t, &mut stats)?;
    let mut prev_err = 1e-4f64;
    let mut last_rejected = false;

    for _ in 0..MAX_ATTEMPTS {
        if t >= 1.0 {
            return Ok((x, stats));
        }
        h = h.min(1.0 - t);
        if h < MIN_STEP {
            return Err(Error::Stiffness { t, h });
        }

        let mut k = vec![k1.clone()];
        let mut stage_ok = true;
        for s in 1..7 {
            let mut xs = x.clone();
            for (j, &a) in A[s].iter().enumerate() {
                if a != 0.0 {
                    xs = xs.axpy(sc(h * a), &k[j])?;
                }
            }
            match eval(&xs, t + C[s] * h, &mut stats) {
                Ok(v) if v.is_finite() => k.push(v),
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    stage_ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let err = if stage_ok {
            let x5 = weighted(&x, &k, &B5, h)?;
            let x4 = weighted(&x, &k, &B4, h)?;
            let e = error_norm(&x, &x5, &x4, cfg.rtol, cfg.atol);
            if e.is_finite() {
                Some((x5, e))
            } else {
                None
            }
        } else {
            None
        };

        match err {
            Some((x5, e)) if e <= 1.0 => {
                t = if 1.0 - (t + h) < MIN_STEP { 1.0 } else { t + h };
                x = x5;
                // first-same-as-last: stage 7 is evaluated at the new point
                k1 = k.pop().expect("seven stages");
                stats.accepted += 1;
                let mut factor = if e == 0.0 {
                    MAX_FACTOR
                } else {
                    SAFETY * e.powf(-ALPHA) * prev_err.powf(BETA)
                };
                factor = factor.clamp(MIN_FACTOR, MAX_FACTOR);
                if last_rejected {
                    factor = factor.min(1.0);
                }
                h *= factor;
                prev_err = e.max(1e-4);
                last_rejected = false;
            }
            Some((_, e)) => {
                stats.rejected += 1;
                h *= (SAFETY * e.powf(-1.0 / 5.0)).clamp(MIN_FACTOR, 1.0);
                last_rejected = true;
            }
            None => {
                stats.rejected += 1;
                h *= MIN_FACTOR;
                last_rejected = true;
            }
        }
    }
    Err(Error::NumericAtStep {
        step: stats.accepted,
        detail: format!("dopri5 exceeded {MAX_ATTEMPTS} step attempts"),
    })
}

fn weighted<T: Scalar>(x: &Tensor<T>, k: &[Tensor<T>], b: &[f64; 7], h: f64) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for (ki, &bi) in k.iter().zip(b) {
        if bi != 0.0 {
            out = out.axpy(sc(h * bi), ki)?;
        }
    }
    Ok(out)
}

/// RMS of component errors scaled by `atol + rtol·max(|x|, |x_new|)`.
fn error_norm<T: Scalar>(x: &Tensor<T>, x5: &Tensor<T>, x4: &Tensor<T>, rtol: f64, atol: f64) -> f64 {
    let n = x.len() as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(x5.data())
        .zip(x4.data())
        .map(|((&a, &b), &c)| {
            let a = a.to_f64().unwrap_or(f64::NAN);
            let b = b.to_f64().unwrap_or(f64::NAN);
            let c = c.to_f64().unwrap_or(f64::NAN);
            let scale = atol + rtol * a.abs().max(b.abs());
            ((b - c) / scale).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

/// Integrates with the configured method; `nfe` is only counted for Dopri5.
pub fn integrate<T: Scalar, F: VelocityField<T>>(
    field: &F,
    x0: &Tensor<T>,
    cond: &F::Cond,
    cfg: &SamplerConfig,
) -> Result<(Tensor<T>, SolveStats)> {
    match cfg.method {
        Method::Dopri5 => integrate_dopri5(field, x0, cond, cfg),
        _ => Ok((integrate_fixed(field, x0, cond, cfg)?, SolveStats::default())),
    }
}

/// Standard-normal start state drawn from `seed`.
pub fn initial_noise<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, || sc(rng.sample::<f64, _>(StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `v = -x`, with the null condition returning zero.
    struct Decay;
    impl VelocityField<f64> for Decay {
        type Cond = bool;
        fn velocity(&self, x: &Tensor<f64>, _t: f64, cond: &bool) -> Result<Tensor<f64>> {
            Ok(if *cond { x.scale(-1.0) } else { Tensor::zeros(x.shape()) })
        }
        fn null_cond(&self, _: &bool) -> bool {
            false
        }
    }

    /// Constant velocities: `2` conditioned, `1` unconditioned.
    struct Constant;
    impl VelocityField<f64> for Constant {
        type Cond = bool;
        fn velocity(&self, x: &Tensor<f64>, _t: f64, cond: &bool) -> Result<Tensor<f64>> {
            Ok(Tensor::full(x.shape(), if *cond { 2.0 } else { 1.0 }))
        }
        fn null_cond(&self, _: &bool) -> bool {
            false
        }
    }

    struct Blowup;
    impl VelocityField<f64> for Blowup {
        type Cond = ();
        fn velocity(&self, x: &Tensor<f64>, _t: f64, _: &()) -> Result<Tensor<f64>> {
            Ok(x.map(|v| v * 1e300))
        }
        fn null_cond(&self, _: &()) {}
    }

    fn cfg(method: Method, steps: usize) -> SamplerConfig {
        SamplerConfig {
            method,
            steps,
            cfg_scale: 1.0,
            rtol: 1e-6,
            atol: 1e-9,
            ..SamplerConfig::default()
        }
    }

    fn x0() -> Tensor<f64> {
        Tensor::new(&[3], vec![1.0, -0.5, 2.0]).unwrap()
    }

    fn decay_error(method: Method, steps: usize) -> f64 {
        let x = integrate_fixed(&Decay, &x0(), &true, &cfg(method, steps)).unwrap();
        x.max_abs_diff(&x0().scale((-1.0f64).exp())).unwrap()
    }

    #[test]
    fn guidance_arithmetic() {
        let x = x0();
        let v = cfg_velocity(&Constant, &x, 0.3, &true, 3.0).unwrap();
        assert!(v.data().iter().all(|&e| e == 4.0));
        assert_eq!(cfg_velocity(&Constant, &x, 0.3, &true, 1.0).unwrap(), Constant.velocity(&x, 0.3, &true).unwrap());
        assert_eq!(cfg_velocity(&Constant, &x, 0.3, &true, 0.0).unwrap(), Constant.velocity(&x, 0.3, &false).unwrap());
    }

    #[test]
    fn constant_field_is_exact_for_every_method() {
        for m in [Method::Euler, Method::Midpoint, Method::Rk4] {
            for steps in [1, 3, 8] {
                let x = integrate_fixed(&Constant, &x0(), &true, &cfg(m, steps)).unwrap();
                assert!(x.max_abs_diff(&x0().map(|v| v + 2.0)).unwrap() < 1e-12);
            }
        }
        let (x, stats) = integrate_dopri5(&Constant, &x0(), &true, &cfg(Method::Dopri5, 1)).unwrap();
        assert!(x.max_abs_diff(&x0().map(|v| v + 2.0)).unwrap() < 1e-12);
        assert_eq!(stats.accepted, 1);
        assert_eq!(stats.rejected, 0);
    }

    #[test]
    fn single_euler_step() {
        let x = integrate_fixed(&Decay, &x0(), &true, &cfg(Method::Euler, 1)).unwrap();
        assert_eq!(x, Tensor::zeros(&[3]));
    }

    #[test]
    fn error_ratios_on_decay() {
        let e = decay_error(Method::Euler, 32) / decay_error(Method::Euler, 64);
        assert!((e - 2.0).abs() < 0.2, "{e}");
        let r = decay_error(Method::Rk4, 16) / decay_error(Method::Rk4, 32);
        assert!((r - 16.0).abs() < 2.0, "{r}");
    }

    #[test]
    fn dopri5_accuracy_and_monotone_tolerance() {
        let exact = x0().scale((-1.0f64).exp());
        let mut c = cfg(Method::Dopri5, 1);
        c.rtol = 1e-6;
        c.atol = 1e-9;
        let (fine, stats) = integrate_dopri5(&Decay, &x0(), &true, &c).unwrap();
        let fine_err = fine.max_abs_diff(&exact).unwrap();
        assert!(fine_err < 1e-5, "{fine_err}");
        assert!(stats.nfe >= 6 * stats.accepted);
        c.rtol = 1e-3;
        let (coarse, _) = integrate_dopri5(&Decay, &x0(), &true, &c).unwrap();
        assert!(coarse.max_abs_diff(&exact).unwrap() >= fine_err);
    }

    #[test]
    fn non_finite_state_reports_the_step() {
        let err = integrate_fixed(&Blowup, &x0(), &(), &cfg(Method::Euler, 4)).unwrap_err();
        assert!(matches!(err, Error::NumericAtStep { step: 1, .. }), "{err:?}");
        let err = integrate_dopri5(&Blowup, &x0(), &(), &cfg(Method::Dopri5, 1)).unwrap_err();
        assert!(matches!(err, Error::Stiffness { .. }), "{err:?}");
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig { steps: 0, ..SamplerConfig::default() }.validate().is_err());
        assert!(SamplerConfig { rtol: 0.0, ..SamplerConfig::default() }.validate().is_err());
        assert!(SamplerConfig { cfg_scale: -1.0, ..SamplerConfig::default() }.validate().is_err());
        assert_eq!(default_cfg_scale(Task::V2S), 3.0);
        assert_eq!(default_cfg_scale(Task::VisualTTS), 1.5);
    }

    #[test]
    fn noise_is_seeded() {
        assert_eq!(initial_noise::<f32>(&[4, 2], 5), initial_noise::<f32>(&[4, 2], 5));
        assert_ne!(initial_noise::<f32>(&[4, 2], 5), initial_noise::<f32>(&[4, 2], 6));
    }
}
