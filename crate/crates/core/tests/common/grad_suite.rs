//! Randomized finite-difference checks for every differentiable primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewdiff::tensor::{Element, InterpMode, Tape, Tensor, Var};
use viewdiff::Result;

use super::gradcheck::{max_rel_error, random_tensor, Probe};

pub const INSTANCES: u64 = 20;
pub const FD_STEP: f64 = 1e-5;
pub const TOL_F64: f64 = 1e-6;
pub const TOL_F32: f64 = 1e-4;

#[derive(Clone, Debug)]
pub enum Case {
    Add,
    AddBroadcast,
    Sub,
    Mul,
    MulBroadcast,
    Scale(f64),
    Silu,
    MatMul,
    MatMulBatched,
    MatMulShared,
    MatMulNt,
    Conv2d { stride: usize },
    LayerNorm,
    Attention,
    Interpolate { h: usize, w: usize, mode: InterpMode },
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Sum,
    Mean,
    SumLast,
    Softmax,
    CrossEntropy(Vec<usize>),
    L2Normalize,
    Embedding(Vec<usize>),
}

impl Probe for Case {
    fn eval<E: Element>(&self, t: &mut Tape<E>, x: &[Var]) -> Result<Var> {
        match self {
            Case::Add | Case::AddBroadcast => t.add(x[0], x[1]),
            Case::Sub => t.sub(x[0], x[1]),
            Case::Mul | Case::MulBroadcast => t.mul(x[0], x[1]),
            Case::Scale(c) => Ok(t.scale(x[0], *c)),
            Case::Silu => Ok(t.silu(x[0])),
            Case::MatMul | Case::MatMulBatched | Case::MatMulShared => t.matmul(x[0], x[1]),
            Case::MatMulNt => t.matmul_nt(x[0], x[1]),
            Case::Conv2d { stride } => t.conv2d(x[0], x[1], *stride),
            Case::LayerNorm => t.layer_norm(x[0], 1e-5),
            Case::Attention => t.attention(x[0], x[1], x[2]),
            Case::Interpolate { h, w, mode } => t.interpolate2d(x[0], *h, *w, *mode),
            Case::Concat { axis } => t.concat(x, *axis),
            Case::Narrow { axis, start, len } => t.narrow(x[0], *axis, *start, *len),
            Case::Reshape(s) => t.reshape(x[0], s),
            Case::Permute(p) => t.permute(x[0], p),
            Case::Sum => Ok(t.sum(x[0])),
            Case::Mean => Ok(t.mean(x[0])),
            Case::SumLast => t.sum_last(x[0]),
            Case::Softmax => t.softmax(x[0]),
            Case::CrossEntropy(targets) => t.cross_entropy(x[0], targets),
            Case::L2Normalize => t.l2_normalize(x[0], 1e-12),
            Case::Embedding(ids) => t.embedding(x[0], ids),
        }
    }
}

pub const PRIMITIVES: &[&str] = &[
    "add", "add_broadcast", "sub", "mul", "mul_broadcast", "scale", "silu", "matmul",
    "matmul_batched", "matmul_shared", "matmul_nt", "conv2d_s1", "conv2d_s2", "layer_norm",
    "attention", "interp_nearest", "interp_bilinear", "concat", "narrow", "reshape", "permute",
    "sum", "mean", "sum_last", "softmax", "cross_entropy", "l2_normalize", "embedding",
];

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// A random instance of primitive `name`.
pub fn instance(name: &str, seed: u64) -> (Case, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ name.len() as u64);
    let r = &mut rng;
    let shape3 = |r: &mut ChaCha8Rng| vec![dim(r, 1, 3), dim(r, 1, 4), dim(r, 2, 5)];
    match name {
        "add" | "sub" | "mul" => {
            let s = shape3(r);
            let case = match name {
                "add" => Case::Add,
                "sub" => Case::Sub,
                _ => Case::Mul,
            };
            (case, vec![random_tensor(r, &s, true), random_tensor(r, &s, true)])
        }
        "add_broadcast" | "mul_broadcast" => {
            let s = vec![dim(r, 1, 3), dim(r, 1, 4), dim(r, 2, 4), dim(r, 2, 4)];
            // channel-style broadcast [1, c, 1, 1] or trailing-axis [w]
            let b = if r.random_bool(0.5) { vec![1, s[1], 1, 1] } else { vec![s[3]] };
            let case = if name == "add_broadcast" { Case::AddBroadcast } else { Case::MulBroadcast };
            (case, vec![random_tensor(r, &s, true), random_tensor(r, &b, true)])
        }
        "scale" => {
            let s = shape3(r);
            (Case::Scale(r.random_range(-2.0..2.0)), vec![random_tensor(r, &s, true)])
        }
        "silu" => {
            let s = shape3(r);
            (Case::Silu, vec![random_tensor(r, &s, true)])
        }
        "matmul" => {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            (Case::MatMul, vec![random_tensor(r, &[m, k], true), random_tensor(r, &[k, n], true)])
        }
        "matmul_batched" => {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            (Case::MatMulBatched, vec![random_tensor(r, &[b, m, k], true), random_tensor(r, &[b, k, n], true)])
        }
        "matmul_shared" => {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            (Case::MatMulShared, vec![random_tensor(r, &[b, m, k], true), random_tensor(r, &[k, n], true)])
        }
        "matmul_nt" => {
            let (b, m, k, n) = (dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            (Case::MatMulNt, vec![random_tensor(r, &[b, m, k], true), random_tensor(r, &[b, n, k], true)])
        }
        "conv2d_s1" | "conv2d_s2" => {
            let stride = if name == "conv2d_s1" { 1 } else { 2 };
            let (b, c, o, h, w) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 2, 5), dim(r, 2, 5));
            (
                Case::Conv2d { stride },
                vec![random_tensor(r, &[b, c, h, w], true), random_tensor(r, &[o, c, 3, 3], true)],
            )
        }
        "layer_norm" => {
            let s = vec![dim(r, 1, 4), dim(r, 3, 6)];
            (Case::LayerNorm, vec![random_tensor(r, &s, true)])
        }
        "attention" => {
            let (b, h, nq, nk, d, dv) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3));
            (
                Case::Attention,
                vec![
                    random_tensor(r, &[b, h, nq, d], true),
                    random_tensor(r, &[b, h, nk, d], true),
                    random_tensor(r, &[b, h, nk, dv], true),
                ],
            )
        }
        "interp_nearest" | "interp_bilinear" => {
            let mode = if name == "interp_nearest" { InterpMode::Nearest } else { InterpMode::Bilinear };
            let s = vec![dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4)];
            (
                Case::Interpolate { h: dim(r, 1, 6), w: dim(r, 1, 6), mode },
                vec![random_tensor(r, &s, true)],
            )
        }
        "concat" => {
            let s = shape3(r);
            let axis = dim(r, 0, 2);
            let mut s2 = s.clone();
            s2[axis] = dim(r, 1, 3);
            (Case::Concat { axis }, vec![random_tensor(r, &s, true), random_tensor(r, &s2, true)])
        }
        "narrow" => {
            let s = shape3(r);
            let axis = dim(r, 0, 2);
            let start = dim(r, 0, s[axis] - 1);
            let len = dim(r, 1, s[axis] - start);
            (Case::Narrow { axis, start, len }, vec![random_tensor(r, &s, true)])
        }
        "reshape" => {
            let s = shape3(r);
            let n: usize = s.iter().product();
            (Case::Reshape(vec![n]), vec![random_tensor(r, &s, true)])
        }
        "permute" => {
            let s = vec![dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let mut p = vec![0, 1, 2, 3];
            for i in (1..4).rev() {
                let j = dim(r, 0, i);
                p.swap(i, j);
            }
            (Case::Permute(p), vec![random_tensor(r, &s, true)])
        }
        "sum" | "mean" | "sum_last" | "softmax" | "l2_normalize" => {
            let s = shape3(r);
            let case = match name {
                "sum" => Case::Sum,
                "mean" => Case::Mean,
                "sum_last" => Case::SumLast,
                "softmax" => Case::Softmax,
                _ => Case::L2Normalize,
            };
            (case, vec![random_tensor(r, &s, true)])
        }
        "cross_entropy" => {
            let (n, k) = (dim(r, 1, 5), dim(r, 2, 5));
            let targets = (0..n).map(|_| dim(r, 0, k - 1)).collect();
            (Case::CrossEntropy(targets), vec![random_tensor(r, &[n, k], true)])
        }
        "embedding" => {
            let (v, d, n) = (dim(r, 1, 5), dim(r, 1, 4), dim(r, 1, 6));
            let ids = (0..n).map(|_| dim(r, 0, v - 1)).collect();
            (Case::Embedding(ids), vec![random_tensor(r, &[v, d], true)])
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Worst relative error over all instances of `name`: (64-bit, 32-bit).
pub fn check_primitive(name: &str) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..INSTANCES {
        let (case, inputs) = instance(name, seed);
        worst.0 = worst.0.max(max_rel_error::<f64, _>(&case, &inputs, seed, FD_STEP));
        worst.1 = worst.1.max(max_rel_error::<f32, _>(&case, &inputs, seed, FD_STEP));
    }
    worst
}
