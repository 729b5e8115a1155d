//! Discrete variance-preserving noise schedule.
//!
//! Stores the cumulative products `alpha_bar[t]` for `t = 0..=T` with
//! `alpha_bar[0] = 1`, and exposes the signal coefficient `s_t = sqrt(alpha_bar[t])`
//! and noise coefficient `sigma_t = sqrt(1 - alpha_bar[t])`. The rest of the
//! crate only ever talks in terms of `s_t` / `sigma_t`.

use crate::error::{Error, Result};
use crate::tensor::Element;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

impl NoiseSchedule {
    /// Linearly spaced `beta_1..beta_T`, cumulative products at 64-bit.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        betas.push(0.0);
        alpha_bar.push(1.0);
        let span = beta_end - beta_start;
        for t in 1..=steps {
            let beta = beta_start + span * (t - 1) as f64 / (steps - 1) as f64;
            betas.push(beta);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Ok(Self {
            steps,
            beta_start,
            beta_end,
            betas,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    /// `s_t = sqrt(alpha_bar[t])`
    pub fn signal(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    /// `sigma_t = sqrt(1 - alpha_bar[t])`
    pub fn noise(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// Signal-to-noise ratio `s_t^2 / sigma_t^2`; `f64::INFINITY` at `t = 0`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        if t == 0 {
            return Ok(f64::INFINITY);
        }
        Ok(ab / (1.0 - ab))
    }

    /// `x_t = s_t * x0 + sigma_t * eps`.
    pub fn forward_diffuse<E: Element>(&self, x0: &[E], t: usize, eps: &[E]) -> Result<Vec<E>> {
        if x0.len() != eps.len() {
            return Err(Error::shape(
                "forward_diffuse",
                format!("x0 has {} values, eps has {}", x0.len(), eps.len()),
            ));
        }
        let s = E::from_f64(self.signal(t)?);
        let n = E::from_f64(self.noise(t)?);
        Ok(x0.iter().zip(eps).map(|(&x, &e)| s * x + n * e).collect())
    }
}
