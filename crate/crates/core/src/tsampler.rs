//! Training-time timestep distributions over `{1..=1000}`.
//!
//! Both the uniform law and the renormalized truncated Gaussian are stored as
//! exact discrete PMFs with a cumulative table; sampling is inverse-CDF.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

pub const LOWEST: usize = 1;
pub const HIGHEST: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimestepKind {
    Uniform,
    Gaussian { mean: f64, std: f64 },
}

impl fmt::Display for TimestepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimestepKind::Uniform => write!(f, "uniform"),
            TimestepKind::Gaussian { mean, std } => write!(f, "gaussian({mean},{std})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepDistribution {
    kind: TimestepKind,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl TimestepDistribution {
    pub fn uniform() -> Self {
        let n = HIGHEST - LOWEST + 1;
        Self::from_weights(TimestepKind::Uniform, &vec![1.0; n]).expect("uniform weights")
    }

    /// `pmf[t] ∝ exp(-(t - mean)^2 / (2 std^2))` at integer `t`, renormalized.
    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian timestep law needs finite mean and std > 0, got mean={mean}, std={std}"
            )));
        }
        let weights: Vec<f64> = (LOWEST..=HIGHEST)
            .map(|t| {
                let z = (t as f64 - mean) / std;
                // keep every step reachable even when the tail underflows
                (-0.5 * z * z).exp().max(f64::MIN_POSITIVE)
            })
            .collect();
        Self::from_weights(TimestepKind::Gaussian { mean, std }, &weights)
    }

    pub fn from_kind(kind: TimestepKind) -> Result<Self> {
        match kind {
            TimestepKind::Uniform => Ok(Self::uniform()),
            TimestepKind::Gaussian { mean, std } => Self::gaussian(mean, std),
        }
    }

    /// Normalizes positive weights for `t = 1..=1000` (in order) into a PMF.
    pub fn from_weights(kind: TimestepKind, weights: &[f64]) -> Result<Self> {
        if weights.len() != HIGHEST - LOWEST + 1 {
            return Err(Error::invalid(format!(
                "expected {} weights, got {}",
                HIGHEST - LOWEST + 1,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("timestep weights must be finite and positive"));
        }
        let total: f64 = weights.iter().sum();
        let pmf: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for p in &pmf {
            acc += p;
            cdf.push(acc.min(1.0));
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self { kind, pmf, cdf })
    }

    pub fn kind(&self) -> TimestepKind {
        self.kind
    }

    pub fn pmf(&self, t: usize) -> f64 {
        if (LOWEST..=HIGHEST).contains(&t) {
            self.pmf[t - LOWEST]
        } else {
            0.0
        }
    }

    pub fn cdf(&self, t: usize) -> f64 {
        if t < LOWEST {
            0.0
        } else if t >= HIGHEST {
            1.0
        } else {
            self.cdf[t - LOWEST]
        }
    }

    pub fn pmf_table(&self) -> &[f64] {
        &self.pmf
    }

    /// Timestep assigned to a uniform variate `u ∈ [0, 1)`: the smallest `t` with `cdf[t] > u`.
    pub fn quantile(&self, u: f64) -> usize {
        let idx = self.cdf.partition_point(|&c| c <= u);
        LOWEST + idx.min(self.cdf.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.quantile(rng.random::<f64>())).collect()
    }

    /// Most probable timestep (lowest on ties).
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.pmf.iter().enumerate() {
            if p > self.pmf[best] {
                best = i;
            }
        }
        LOWEST + best
    }
}
