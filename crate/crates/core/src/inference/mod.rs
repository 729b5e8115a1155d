//! Reverse-process sampling with DDIM steps and predicted-x0 extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::UNetDenoiser;
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::refnet::ConditionBundle;
use crate::schedule::NoiseSchedule;
use crate::tensor::Element;

/// Timestep used by the single-pass validation estimate.
pub const T_EVAL: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// 0 is deterministic DDIM, 1 matches ancestral sampling noise.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 200, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    /// Evenly strided, strictly decreasing timesteps `T, T - T/n, ...`.
    pub fn timesteps(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        let big_t = schedule.steps();
        if self.steps == 0 || self.steps > big_t {
            return Err(Error::invalid(format!("sampler steps must be in 1..={big_t}, got {}", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        Ok((0..self.steps).map(|i| big_t - i * big_t / self.steps).collect())
    }
}

/// Anything that predicts the noise in a batch of noisy images at one timestep.
pub trait NoisePredictor {
    fn predict(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// A denoiser bound to fixed per-sample condition bundles.
pub struct Conditioned<'a, E: Element> {
    pub model: &'a UNetDenoiser<E>,
    pub bundles: Vec<&'a ConditionBundle>,
}

impl<E: Element> NoisePredictor for Conditioned<'_, E> {
    fn predict(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let s = self.model.config.image;
        let b = self.bundles.len();
        let mut g = Graph::new(&self.model.params, false);
        let x = g.input(&[b, 3, s, s], x_t.iter().map(|&v| E::from_f64(v)).collect())?;
        let cond = self.model.cond_inputs(&mut g, &self.bundles)?;
        let out = self.model.forward(&mut g, x, &vec![t; b], &cond)?;
        Ok(g.tape.value(out).iter().map(|v| v.as_f64()).collect())
    }
}

/// `(x_t - sigma_t * eps_hat) / s_t`.
pub fn predicted_x0(schedule: &NoiseSchedule, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::invalid("predicted x0 is undefined at t = 0"));
    }
    if x_t.len() != eps_hat.len() {
        return Err(Error::shape("predicted_x0", format!("{} vs {} values", x_t.len(), eps_hat.len())));
    }
    let (s, n) = (schedule.signal(t)?, schedule.noise(t)?);
    Ok(x_t.iter().zip(eps_hat).map(|(&x, &e)| (x - n * e) / s).collect())
}

/// Standard deviation of the fresh noise injected by a step `t -> t_prev`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
    if t_prev >= t {
        return Err(Error::invalid(format!("DDIM step needs t_prev < t, got {t_prev} -> {t}")));
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?);
    let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
    Ok(eta * var.max(0.0).sqrt())
}

/// One DDIM update from `x_t` to `x_{t_prev}`.
///
/// Fresh noise is only drawn when the step is stochastic, so `eta = 0` never
/// touches `rng`.
pub fn ddim_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_hat: &[f64],
    eta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let tilde = ddim_sigma(schedule, t, t_prev, eta)?;
    let sigma_prev = schedule.noise(t_prev)?;
    if tilde * tilde > sigma_prev * sigma_prev {
        return Err(Error::invalid(format!(
            "eta = {eta} injects more noise ({tilde}) than the target level {sigma_prev} allows"
        )));
    }
    let x0 = predicted_x0(schedule, x_t, t, eps_hat)?;
    let s_prev = schedule.signal(t_prev)?;
    let dir = (sigma_prev * sigma_prev - tilde * tilde).sqrt();
    Ok(x0
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let fresh = if tilde > 0.0 { tilde * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            s_prev * x + dir * e + fresh
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Final state clamped to `[-1, 1]`.
    pub image: Vec<f64>,
    /// Predicted x0 at each retained timestep, in sampling order.
    pub trajectory: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
}

/// Runs the reverse process from `x_T ~ N(0, I)` over `len` values.
pub fn sample(predictor: &dyn NoisePredictor, len: usize, schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<SampleOutput> {
    let ts = config.timesteps(schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let mut trajectory = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = predictor.predict(&x, t)?;
        if eps.len() != len {
            return Err(Error::shape("sample", format!("predictor returned {} values for {len}", eps.len())));
        }
        trajectory.push(predicted_x0(schedule, &x, t, &eps)?);
        x = ddim_step(schedule, &x, t, t_prev, &eps, config.eta, &mut rng)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled image".into()));
    }
    let image = x.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(SampleOutput { image, trajectory, timesteps: ts })
}

/// One-call estimate of `x0`: diffuse with seeded noise to `t_eval`, predict
/// the noise once and invert.
pub fn single_pass_estimate<R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x0: &[f64],
    t_eval: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x_t = schedule.forward_diffuse(x0, t_eval, &eps)?;
    let eps_hat = predictor.predict(&x_t, t_eval)?;
    predicted_x0(schedule, &x_t, t_eval, &eps_hat)
}
