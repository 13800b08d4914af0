//! Noise schedules, the closed-form forward process, clean-latent estimation
//! and the ancestral (DDPM) reverse step.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1` standing for
//! clean data. Latents are candle tensors in channel-last layout; every
//! operation here keeps the autograd graph intact so that guidance can
//! differentiate through it.

use candle_core::{Device, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Parameters from which a [`NoiseSchedule`] is built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(
            self.train_steps,
            self.beta_start,
            self.beta_end,
            self.inference_steps,
        )
    }
}

/// Per-timestep diffusion scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
    inference_steps: Vec<usize>,
}

/// Linear beta schedule with `inference_count` evenly spaced sampling steps.
pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    inference_count: usize,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    if inference_count == 0 || inference_count > steps {
        return Err(Error::InvalidArgument(format!(
            "inference count {inference_count} outside 1..={steps}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_var = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).max(0.0)
        })
        .collect();
    let inference_steps = (0..inference_count)
        .map(|k| steps - (k * steps) / inference_count)
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        posterior_var,
        inference_steps,
    })
}

/// The scalars of one (possibly respaced) reverse step `t -> prev`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub t: usize,
    pub prev: usize,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    /// Effective `beta` of the jump, `1 - alpha_bar / alpha_bar_prev`.
    pub beta: f64,
    /// Posterior standard deviation; zero on the final step.
    pub sigma: f64,
}

impl NoiseSchedule {
    /// Number of training timesteps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )))
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    /// `alpha_bar(t)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            Ok(self.alpha_bar[self.check(t)?])
        }
    }

    /// Single-step posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Sampling timesteps, strictly decreasing.
    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    /// The timestep a reverse step from `t` lands on: the next inference step
    /// when `t` is one, otherwise `t - 1`.
    pub fn prev_timestep(&self, t: usize) -> Result<usize> {
        self.check(t)?;
        match self.inference_steps.iter().position(|&s| s == t) {
            Some(i) => Ok(self.inference_steps.get(i + 1).copied().unwrap_or(0)),
            None => Ok(t - 1),
        }
    }

    pub fn step_coefficients(&self, t: usize) -> Result<StepCoefficients> {
        let prev = self.prev_timestep(t)?;
        let alpha_bar = self.alpha_bar(t)?;
        let alpha_bar_prev = self.alpha_bar(prev)?;
        let beta = 1.0 - alpha_bar / alpha_bar_prev;
        let sigma = if prev == 0 {
            0.0
        } else {
            ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta)
                .max(0.0)
                .sqrt()
        };
        Ok(StepCoefficients {
            t,
            prev,
            alpha_bar,
            alpha_bar_prev,
            beta,
            sigma,
        })
    }
}

/// A latent paired with its timestep.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Tensor, t: usize, sched: &NoiseSchedule) -> Result<Self> {
        if t > sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} beyond schedule length {}",
                sched.steps()
            )));
        }
        ensure_finite(&z, "latent")?;
        Ok(Self { z, t })
    }
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `ca * a + cb * b` evaluated in f64 and returned in `a`'s dtype, so the
/// large coefficients near `t = T` add no rounding of their own.
fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Result<Tensor> {
    let a64 = a.to_dtype(candle_core::DType::F64)?;
    let b64 = b.to_dtype(candle_core::DType::F64)?;
    Ok((a64.affine(ca, 0.0)? + b64.affine(cb, 0.0)?)?.to_dtype(a.dtype())?)
}

/// `sqrt(abar) * z0 + sqrt(1 - abar) * eps` for an explicit `abar`.
pub fn forward_diffuse_with(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    ensure_same_shape(z0, eps, "forward_diffuse")?;
    combine(z0, alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// Closed-form sample of `q(z_t | z_0)`.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check(t)?;
    forward_diffuse_with(z0, eps, sched.alpha_bar(t)?)
}

/// Batched forward process with one timestep per leading-axis item.
pub fn forward_diffuse_batch(
    z0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_same_shape(z0, eps, "forward_diffuse_batch")?;
    let b = z0.dim(0)?;
    if ts.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch {b}", ts.len())));
    }
    let mut sa = Vec::with_capacity(b);
    let mut sb = Vec::with_capacity(b);
    for &t in ts {
        sched.check(t)?;
        let ab = sched.alpha_bar(t)?;
        sa.push(ab.sqrt());
        sb.push((1.0 - ab).sqrt());
    }
    let mut shape = vec![1usize; z0.rank()];
    shape[0] = b;
    let dtype = z0.dtype();
    let sa = Tensor::from_vec(sa, shape.clone(), z0.device())?.to_dtype(dtype)?;
    let sb = Tensor::from_vec(sb, shape, z0.device())?.to_dtype(dtype)?;
    Ok((z0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?)
}

/// Inverts the forward process for an explicit `abar`.
pub fn estimate_x0_with(z_t: &Tensor, eps_pred: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    ensure_same_shape(z_t, eps_pred, "estimate_x0")?;
    if alpha_bar <= 0.0 {
        return Err(Error::InvalidArgument(
            "alpha_bar is zero, the clean latent is unrecoverable".into(),
        ));
    }
    let inv = 1.0 / alpha_bar.sqrt();
    let k = (1.0 - alpha_bar).sqrt() / alpha_bar.sqrt();
    combine(z_t, inv, eps_pred, -k)
}

/// `z_t / sqrt(abar_t) - sqrt(1 - abar_t) * eps_pred / sqrt(abar_t)`.
pub fn estimate_x0(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check(t)?;
    estimate_x0_with(z_t, eps_pred, sched.alpha_bar(t)?)
}

/// Posterior mean of the reverse step from `t`.
pub fn posterior_mean(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_same_shape(z_t, eps_pred, "posterior_mean")?;
    let c = sched.step_coefficients(t)?;
    let alpha = 1.0 - c.beta;
    let inv = 1.0 / alpha.sqrt();
    let k = c.beta / (1.0 - c.alpha_bar).sqrt() * inv;
    combine(z_t, inv, eps_pred, -k)
}

/// One ancestral step: posterior mean plus `sigma_t * noise`, with the noise
/// term dropped on the final step.
pub fn posterior_step(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let mean = posterior_mean(z_t, t, eps_pred, sched)?;
    add_posterior_noise(&mean, t, sched, noise)
}

pub(crate) fn add_posterior_noise(
    mean: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let c = sched.step_coefficients(t)?;
    if c.prev == 0 {
        return Ok(mean.clone());
    }
    ensure_same_shape(mean, noise, "posterior_step noise")?;
    Ok((mean + noise.affine(c.sigma, 0.0)?)?)
}

/// Seeded, step-indexed Gaussian noise shared by every sampler so that runs
/// with different guidance strengths consume identical draws.
#[derive(Clone, Copy, Debug)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn draw(&self, label: &str, index: u64, shape: &Shape) -> Result<Tensor> {
        let v = rng::normal_vec(self.seed, label, index, shape.elem_count());
        Ok(Tensor::from_vec(v, shape.clone(), &Device::Cpu)?)
    }

    /// The starting latent `z_T`.
    pub fn initial(&self, shape: &Shape) -> Result<Tensor> {
        self.draw("sampler-init", 0, shape)
    }

    /// Noise injected by the reverse step from `t`.
    pub fn step(&self, t: usize, shape: &Shape) -> Result<Tensor> {
        self.draw("sampler-step", t as u64, shape)
    }
}

/// The unguided ancestral sampler: starts from `z_T ~ N(0, I)` and applies
/// [`posterior_step`] over the schedule's inference steps.
pub fn sample_plain<F>(
    sched: &NoiseSchedule,
    shape: &Shape,
    noise: NoiseStream,
    mut eps_fn: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut z = noise.initial(shape)?;
    for &t in sched.inference_steps() {
        let eps = eps_fn(&z, t)?;
        let n = noise.step(t, shape)?;
        z = posterior_step(&z, t, &eps, sched, &n)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(v, (1, n, 1, 1), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.5, 0.5, 1).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.inference_steps(), &[1]);
    }

    #[test]
    fn full_inference_has_no_respacing() {
        let s = build_schedule(10, 1e-3, 0.1, 10).unwrap();
        assert_eq!(s.inference_steps(), &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);
        let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
        assert_eq!(s.inference_steps()[0], 1000);
        assert_eq!(*s.inference_steps().last().unwrap(), 20);
        assert!(s.inference_steps().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(build_schedule(10, 0.02, 0.01, 5).is_err());
        assert!(build_schedule(10, 0.0, 0.01, 5).is_err());
        assert!(build_schedule(10, 0.01, 1.0, 5).is_err());
        assert!(build_schedule(10, 0.01, 0.02, 11).is_err());
        assert!(build_schedule(0, 0.01, 0.02, 1).is_err());
        assert!(build_schedule(10, 0.01, 0.02, 0).is_err());
    }

    #[test]
    fn unit_alpha_bar_is_identity() {
        let z0 = tensor(vec![0.3, -1.2, 2.0]);
        let eps = tensor(vec![5.0, 5.0, 5.0]);
        let out = forward_diffuse_with(&z0, &eps, 1.0).unwrap();
        assert_eq!(values(&out), values(&z0));
    }

    #[test]
    fn zero_signal_scales_noise() {
        let s = build_schedule(100, 1e-3, 0.05, 10).unwrap();
        let z0 = tensor(vec![0.0; 4]);
        let eps = tensor(vec![1.0, -2.0, 0.5, 3.0]);
        let out = forward_diffuse(&z0, 40, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(40).unwrap()).sqrt() as f32;
        for (o, e) in values(&out).iter().zip(values(&eps)) {
            assert_eq!(*o, e * k);
        }
    }

    #[test]
    fn x0_errors() {
        let z = tensor(vec![1.0]);
        assert!(estimate_x0_with(&z, &z, 0.0).is_err());
        assert!(estimate_x0_with(&z, &tensor(vec![1.0, 2.0]), 0.5).is_err());
        let s = build_schedule(10, 1e-3, 0.1, 10).unwrap();
        assert!(estimate_x0(&z, 0, &z, &s).is_err());
        assert!(estimate_x0(&z, 11, &z, &s).is_err());
    }

    #[test]
    fn zero_eps_x0_is_rescaled_latent() {
        let s = build_schedule(100, 1e-3, 0.05, 10).unwrap();
        let z = tensor(vec![0.4, -0.7]);
        let out = estimate_x0(&z, 70, &tensor(vec![0.0, 0.0]), &s).unwrap();
        let k = 1.0 / s.alpha_bar(70).unwrap().sqrt();
        for (o, zi) in values(&out).iter().zip(values(&z)) {
            assert!((*o as f64 - zi as f64 * k).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_noise_step_is_the_mean() {
        let s = build_schedule(100, 1e-3, 0.05, 20).unwrap();
        let z = tensor(vec![0.4, -0.7, 1.1]);
        let eps = tensor(vec![0.1, 0.2, -0.3]);
        let mean = posterior_mean(&z, 95, &eps, &s).unwrap();
        let out = posterior_step(&z, 95, &eps, &s, &tensor(vec![0.0; 3])).unwrap();
        assert_eq!(values(&out), values(&mean));
    }

    #[test]
    fn posterior_step_is_deterministic() {
        let s = build_schedule(100, 1e-3, 0.05, 20).unwrap();
        let z = tensor(vec![0.4, -0.7, 1.1]);
        let eps = tensor(vec![0.1, 0.2, -0.3]);
        let n = tensor(vec![1.0, -1.0, 0.5]);
        let a = posterior_step(&z, 95, &eps, &s, &n).unwrap();
        let b = posterior_step(&z, 95, &eps, &s, &n).unwrap();
        let bits = |t: &Tensor| values(t).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn respaced_variance_matches_single_step_formula_without_respacing() {
        let s = build_schedule(50, 1e-3, 0.05, 50).unwrap();
        for t in 2..=50 {
            let c = s.step_coefficients(t).unwrap();
            assert_eq!(c.prev, t - 1);
            let expected = s.posterior_var(t).unwrap();
            assert!((c.sigma * c.sigma - expected).abs() < 1e-12);
            assert!((c.beta - s.beta(t).unwrap()).abs() < 1e-12);
        }
        assert_eq!(s.step_coefficients(1).unwrap().sigma, 0.0);
    }
}
