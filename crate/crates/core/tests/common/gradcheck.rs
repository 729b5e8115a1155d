//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates forward values; it never reads gradients the
//! engine computed, so it stays independent of the reverse-mode code path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewdiff::tensor::{Element, Tape, Tensor, Var};
use viewdiff::Result;

/// A differentiable function of several tensors, evaluable at any precision.
pub trait Probe {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var>;
}

fn weighted_sum<E: Element, P: Probe>(
    probe: &P,
    inputs: &[Tensor<f64>],
    weights: &[f64],
    grad: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<E>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.cast::<E>().with_grad(grad)))
        .collect();
    let out = probe.eval(&mut tape, &vars).expect("probe evaluation");
    let shape = tape.shape(out).to_vec();
    let w = tape
        .constant(&shape, weights.iter().map(|&v| E::from_f64(v)).collect())
        .expect("weight shape");
    let prod = tape.mul(out, w).expect("same shape");
    let loss = tape.sum(prod);
    let value = tape.scalar(loss).unwrap().as_f64();
    if !grad {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.iter().map(|x| x.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();
    (value, grads)
}

pub fn output_len<P: Probe>(probe: &P, inputs: &[Tensor<f64>]) -> usize {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = probe.eval(&mut tape, &vars).expect("probe evaluation");
    tape.value(out).len()
}

/// Normwise relative error `max|analytic - numeric| / max|numeric|` over all
/// inputs, where the analytic gradient is computed at precision `E` and the
/// central-difference oracle always at 64-bit.
pub fn max_rel_error<E: Element, P: Probe>(
    probe: &P,
    inputs: &[Tensor<f64>],
    seed: u64,
    step: f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n_out = output_len(probe, inputs);
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, analytic) = weighted_sum::<E, P>(probe, inputs, &weights, true);
    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let mut numeric = vec![0.0; input.numel()];
        for k in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= step;
            let fp = weighted_sum::<f64, P>(probe, &plus, &weights, false).0;
            let fm = weighted_sum::<f64, P>(probe, &minus, &weights, false).0;
            numeric[k] = (fp - fm) / (2.0 * step);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let diff = numeric
            .iter()
            .zip(&analytic[which])
            .fold(0.0f64, |m, (n, a)| m.max((n - a).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], grad: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad(grad)
}
