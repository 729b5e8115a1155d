//! Adam with decoupled weight decay, warmup-cosine learning rate and EMA.

use crate::error::{Error, Result};
use crate::nn::{GradBuffer, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<E: Element>(params: &ParamStore<E>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with learning rate `lr`; moments are kept in `f64`.
    ///
    /// Weight decay is decoupled (`p -= lr * wd * p`) and skips rank-1
    /// parameters (biases and norm gains).
    pub fn update<E: Element>(&mut self, params: &mut ParamStore<E>, grads: &GradBuffer<E>, lr: f64) -> Result<()> {
        if grads.grads.len() != params.len() {
            return Err(Error::invalid("gradient buffer does not match parameters"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let t = params.tensor_mut(i);
            let decay = if t.shape().len() > 1 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grads.grads[i][j].as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = p.as_f64();
                x -= lr * decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *p = E::from_f64(x);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base`, then half-period cosine decay to `final_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub final_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.base;
        }
        if step == self.total {
            return self.final_lr;
        }
        let u = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.final_lr + (self.base - self.final_lr) * (1.0 + (std::f64::consts::PI * u).cos()) / 2.0
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`, parameter by parameter.
pub fn ema_update<E: Element>(shadow: &mut ParamStore<E>, live: &ParamStore<E>, decay: f64) -> Result<()> {
    if !shadow.same_layout(live) {
        return Err(Error::invalid("EMA shadow layout differs from live parameters"));
    }
    for i in 0..live.len() {
        let src = live.tensor(i).data();
        for (s, &p) in shadow.tensor_mut(i).data_mut().iter_mut().zip(src) {
            *s = E::from_f64(decay * s.as_f64() + (1.0 - decay) * p.as_f64());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn sched() -> LrSchedule {
        LrSchedule {
            base: 1e-4,
            final_lr: 1e-5,
            warmup: 200,
            total: 3000,
        }
    }

    #[test]
    fn schedule_anchor_values() {
        let s = sched();
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(200), 1e-4);
        assert_eq!(s.at(3000), 1e-5);
        assert!((s.at(1600) - 5.5e-5).abs() < 1e-18);
        assert!((s.at(100) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = sched();
        for t in 200..3000 {
            assert!(s.at(t + 1) <= s.at(t));
        }
    }

    #[test]
    fn ema_boundaries_and_geometric_decay() {
        let mut live = ParamStore::<f64>::new(0);
        live.declare("p", &[3], Init::Normal(1.0)).unwrap();
        let mut shadow = live.clone();
        shadow.get_mut("p").unwrap().data_mut().iter_mut().for_each(|v| *v += 1.0);
        let frozen = shadow.clone();
        ema_update(&mut shadow, &live, 1.0).unwrap();
        assert_eq!(shadow.get("p"), frozen.get("p"));
        for _ in 0..100 {
            ema_update(&mut shadow, &live, 0.999).unwrap();
        }
        let expected = 0.999f64.powi(100);
        for (s, l) in shadow.get("p").unwrap().data().iter().zip(live.get("p").unwrap().data()) {
            assert!(((s - l) - expected).abs() < 1e-12);
        }
        ema_update(&mut shadow, &live, 0.0).unwrap();
        assert_eq!(shadow.get("p"), live.get("p"));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamStore::<f64>::new(0);
        ps.declare("b", &[2], Init::Zeros).unwrap();
        let mut g = GradBuffer::zeros(&ps);
        g.grads[0] = vec![3.0, -0.5];
        let mut opt = Adam::new(&ps, AdamConfig::default());
        opt.update(&mut ps, &g, 0.1).unwrap();
        let d = ps.get("b").unwrap().data();
        assert!((d[0] + 0.1).abs() < 1e-7 && (d[1] - 0.1).abs() < 1e-7);
    }
}
