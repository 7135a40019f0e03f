//! Closed-form forward noising, the reverse update, and guidance mixing.
//!
//! All noise is supplied by the caller, so every function here is pure.
//! Matrices are flat row-major slices; only their lengths are checked.

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ReverseVariance};

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::shape(a.len(), b.len()))
    }
}

/// A noisy quadrant together with the timestep that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState {
    pub x: Vec<f64>,
    pub t: usize,
}

/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(x0, eps)?;
    sched.check_timestep(t)?;
    let (a, b) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Runs the one-step Markov chain `x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) eps_s`
/// for `s = 1..=t`, pulling one noise matrix per step. Distributionally equal
/// to [`q_sample`]; used to cross-check it.
pub fn iterative_q_sample<I>(x0: &[f64], t: usize, noise: I, sched: &NoiseSchedule) -> Result<Vec<f64>>
where
    I: IntoIterator,
    I::Item: AsRef<[f64]>,
{
    sched.check_timestep(t)?;
    let mut x = x0.to_vec();
    let mut noise = noise.into_iter();
    for s in 1..=t {
        let eps = noise
            .next()
            .ok_or_else(|| Error::shape(format!("{t} noise matrices"), s - 1))?;
        let eps = eps.as_ref();
        same_len(&x, eps)?;
        let (a, b) = (sched.alpha(s).sqrt(), sched.beta(s).sqrt());
        for (xi, e) in x.iter_mut().zip(eps) {
            *xi = a * *xi + b * e;
        }
    }
    Ok(x)
}

/// Classifier-free guidance: `(1 + w) * eps_cond - w * eps_uncond`.
pub fn guided_noise(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    same_len(eps_cond, eps_uncond)?;
    if !(w >= 0.0) {
        return Err(Error::OutOfRange {
            field: "guidance_w",
            value: w,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect())
}

/// One ancestral step `x_t -> x_{t-1}` with the posterior standard deviation.
pub fn reverse_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    reverse_step_with(x_t, t, eps_hat, z, sched, ReverseVariance::Posterior)
}

/// [`reverse_step`] with an explicit noise-scale convention. `z` is ignored at
/// `t = 1`, where the step is deterministic.
pub fn reverse_step_with(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    z: &[f64],
    sched: &NoiseSchedule,
    variance: ReverseVariance,
) -> Result<Vec<f64>> {
    same_len(x_t, eps_hat)?;
    same_len(x_t, z)?;
    sched.check_timestep(t)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = (1.0 - sched.alpha(t)) / sched.sqrt_one_minus_alpha_bar(t);
    let mut out: Vec<f64> = x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| inv_sqrt_alpha * (x - eps_coef * e))
        .collect();
    if t > 1 {
        let sigma = sched.sigma(t, variance);
        for (o, zi) in out.iter_mut().zip(z) {
            *o += sigma * zi;
        }
    }
    Ok(out)
}

/// The noise that maps `x0` to `x_t` under [`q_sample`]:
/// `(x_t - sqrt(alpha_bar_t) x0) / sqrt(1 - alpha_bar_t)`.
pub fn implied_noise(x_t: &[f64], x0: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(x_t, x0)?;
    sched.check_timestep(t)?;
    let (a, b) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
    Ok(x_t.iter().zip(x0).map(|(x, x0)| (x - a * x0) / b).collect())
}
