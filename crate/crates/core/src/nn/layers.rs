//! Parameterized building blocks shared by the encoder and the denoiser.
//!
//! Each block has a `declare_*` function registering its parameters under a
//! name prefix and a forward function reading them back from a [`Graph`].

use super::{Graph, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

pub const NORM_EPS: f64 = 1e-5;

pub fn declare_linear<E: Element>(ps: &mut ParamStore<E>, p: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    ps.declare(&format!("{p}.w"), &[fan_in, fan_out], Init::Normal((1.0 / fan_in as f64).sqrt()))?;
    ps.declare(&format!("{p}.b"), &[fan_out], Init::Zeros)
}

/// As [`declare_linear`] with all-zero weights.
pub fn declare_linear_zero<E: Element>(ps: &mut ParamStore<E>, p: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    ps.declare(&format!("{p}.w"), &[fan_in, fan_out], Init::Zeros)?;
    ps.declare(&format!("{p}.b"), &[fan_out], Init::Zeros)
}

/// `x @ w + b` over the last axis.
pub fn linear<E: Element>(g: &mut Graph<E>, p: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{p}.w"))?;
    let b = g.param(&format!("{p}.b"))?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add(y, b)
}

pub fn declare_conv<E: Element>(ps: &mut ParamStore<E>, p: &str, cin: usize, cout: usize) -> Result<()> {
    declare_conv_scaled(ps, p, cin, cout, 1.0)
}

/// As [`declare_conv`] with the He standard deviation multiplied by `gain`.
pub fn declare_conv_scaled<E: Element>(ps: &mut ParamStore<E>, p: &str, cin: usize, cout: usize, gain: f64) -> Result<()> {
    let std = gain * (2.0 / (9 * cin) as f64).sqrt();
    let init = if std > 0.0 { Init::Normal(std) } else { Init::Zeros };
    ps.declare(&format!("{p}.w"), &[cout, cin, 3, 3], init)?;
    ps.declare(&format!("{p}.b"), &[cout, 1, 1], Init::Zeros)
}

/// 3x3 convolution with bias, padding 1.
pub fn conv<E: Element>(g: &mut Graph<E>, p: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(&format!("{p}.w"))?;
    let b = g.param(&format!("{p}.b"))?;
    let y = g.tape.conv2d(x, w, stride)?;
    g.tape.add(y, b)
}

pub fn declare_layer_norm<E: Element>(ps: &mut ParamStore<E>, p: &str, dim: usize) -> Result<()> {
    ps.declare(&format!("{p}.g"), &[dim], Init::Ones)?;
    ps.declare(&format!("{p}.b"), &[dim], Init::Zeros)
}

/// LayerNorm over the last axis followed by a per-feature affine map.
pub fn layer_norm<E: Element>(g: &mut Graph<E>, p: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{p}.g"))?;
    let beta = g.param(&format!("{p}.b"))?;
    let y = g.tape.layer_norm(x, NORM_EPS)?;
    let y = g.tape.mul(y, gamma)?;
    g.tape.add(y, beta)
}

pub fn declare_group_norm<E: Element>(ps: &mut ParamStore<E>, p: &str, channels: usize) -> Result<()> {
    ps.declare(&format!("{p}.g"), &[channels, 1, 1], Init::Ones)?;
    ps.declare(&format!("{p}.b"), &[channels, 1, 1], Init::Zeros)
}

/// GroupNorm over `[b, c, h, w]` with a per-channel affine map.
pub fn group_norm<E: Element>(g: &mut Graph<E>, p: &str, x: Var, groups: usize) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 4 || s[1] % groups != 0 {
        return Err(Error::shape("group_norm", format!("{:?} with {groups} groups", s)));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let y = g.tape.reshape(x, &[b, groups, c / groups * h * w])?;
    let y = g.tape.layer_norm(y, NORM_EPS)?;
    let y = g.tape.reshape(y, &[b, c, h, w])?;
    let gamma = g.param(&format!("{p}.g"))?;
    let beta = g.param(&format!("{p}.b"))?;
    let y = g.tape.mul(y, gamma)?;
    g.tape.add(y, beta)
}

/// Largest group count `<= 8` dividing `channels`.
pub fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Sinusoidal embedding of a scalar position, `dim` even.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = position * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut ps = ParamStore::<f64>::new(0);
        declare_group_norm(&mut ps, "gn", 4).unwrap();
        let mut g = Graph::new(&ps, false);
        let data: Vec<f64> = (0..32).map(|i| (i * i % 7) as f64).collect();
        let x = g.input(&[1, 4, 2, 4], data).unwrap();
        let y = group_norm(&mut g, "gn", x, 2).unwrap();
        for grp in g.tape.value(y).chunks(16) {
            let m: f64 = grp.iter().sum::<f64>() / 16.0;
            let v: f64 = grp.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sinusoid_is_bounded_and_distinct() {
        let a = sinusoidal(10.0, 64);
        let b = sinusoidal(11.0, 64);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        assert_eq!(groups_for(32), 8);
        assert_eq!(groups_for(12), 6);
    }
}
