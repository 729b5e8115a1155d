//! Finite-difference check of the full denoiser on a miniature configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewdiff::denoiser::{Conditioning, UNetConfig, UNetDenoiser};
use viewdiff::nn::{GradBuffer, Graph, ParamStore};
use viewdiff::refnet::{ConditionBundle, Features};
use viewdiff::tensor::{Element, InterpMode};

pub const MINI_BATCH: usize = 2;
/// Parameter coordinates probed per instance.
pub const COORDS: usize = 120;

pub fn mini_config(conditioning: Conditioning) -> UNetConfig {
    UNetConfig {
        image: 8,
        channels: vec![4],
        res_blocks: 1,
        time_dim: 4,
        emb_dim: 6,
        conditioning,
        interp: InterpMode::Bilinear,
        enc_layers: 2,
        enc_grid: 2,
        enc_dim: 4,
    }
}

pub struct Instance {
    pub params: ParamStore<f64>,
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: Vec<usize>,
    pub cond: Vec<ConditionBundle>,
    pub weights: Vec<f64>,
}

/// Random parameters (zero-initialized ones included), inputs and conditions.
pub fn instance(config: &UNetConfig, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = UNetDenoiser::<f64>::new(config.clone(), seed).unwrap().params;
    for i in 0..params.len() {
        for v in params.tensor_mut(i).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let n = MINI_BATCH * 3 * config.image * config.image;
    let mut rand_vec = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x = rand_vec(n);
    let eps = rand_vec(n);
    let weights = rand_vec(n);
    let tokens = config.enc_grid * config.enc_grid;
    let cond = (0..MINI_BATCH)
        .map(|_| ConditionBundle {
            features: Features {
                grids: (0..config.enc_layers)
                    .map(|_| rand_vec(tokens * config.enc_dim).into_iter().map(|v| v as f32).collect())
                    .collect(),
                cls: rand_vec(config.enc_dim).into_iter().map(|v| v as f32).collect(),
            },
            pose: {
                let p = rand_vec(8);
                std::array::from_fn(|i| p[i] as f32)
            },
        })
        .collect();
    let t = (0..MINI_BATCH).map(|_| rng.random_range(1..=1000)).collect();
    Instance { params, x, eps, t, cond, weights }
}

/// Weighted sum of the predicted noise plus the noise-matching loss.
fn objective<E: Element>(config: &UNetConfig, params: &ParamStore<E>, inst: &Instance, grad: bool) -> (f64, Option<GradBuffer<E>>) {
    let model = UNetDenoiser { config: config.clone(), params: params.clone() };
    let mut g = Graph::new(&model.params, grad);
    let cast = |v: &[f64]| v.iter().map(|&x| E::from_f64(x)).collect::<Vec<E>>();
    let shape = [MINI_BATCH, 3, config.image, config.image];
    let x = g.input(&shape, cast(&inst.x)).unwrap();
    let eps = g.input(&shape, cast(&inst.eps)).unwrap();
    let w = g.input(&shape, cast(&inst.weights)).unwrap();
    let refs: Vec<&ConditionBundle> = inst.cond.iter().collect();
    let cond = model.cond_inputs(&mut g, &refs).unwrap();
    let (loss, pred) = model.eps_loss(&mut g, x, &inst.t, &cond, eps).unwrap();
    let wp = g.tape.mul(pred, w).unwrap();
    let wp = g.tape.sum(wp);
    let total = g.tape.add(loss, wp).unwrap();
    let value = g.tape.scalar(total).unwrap().as_f64();
    if !grad {
        return (value, None);
    }
    g.backward(total).unwrap();
    let mut buf = GradBuffer::zeros(&model.params);
    g.accumulate(&mut buf);
    (value, Some(buf))
}

/// Normwise relative error over `COORDS` random parameter coordinates, with the
/// analytic gradient at precision `E` and central differences at 64-bit.
pub fn model_rel_error<E: Element>(config: &UNetConfig, inst: &Instance, seed: u64, step: f64) -> f64 {
    let (_, grads) = objective::<E>(config, &inst.params.cast::<E>(), inst, true);
    let grads = grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let sizes: Vec<usize> = inst.params.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let (mut worst_diff, mut scale) = (0.0f64, 0.0f64);
    for _ in 0..COORDS {
        let mut k = rng.random_range(0..total);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let mut plus = inst.params.clone();
        plus.tensor_mut(p).data_mut()[k] += step;
        let mut minus = inst.params.clone();
        minus.tensor_mut(p).data_mut()[k] -= step;
        let fp = objective::<f64>(config, &plus, inst, false).0;
        let fm = objective::<f64>(config, &minus, inst, false).0;
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = grads.grads[p][k].as_f64();
        worst_diff = worst_diff.max((numeric - analytic).abs());
        scale = scale.max(numeric.abs());
    }
    worst_diff / scale.max(1e-12)
}
