use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use viewdiff::inference::{
    ddim_sigma, ddim_step, predicted_x0, sample, single_pass_estimate, NoisePredictor, SamplerConfig,
};
use viewdiff::schedule::NoiseSchedule;
use viewdiff::Result;

/// Cumulative products of `1 - beta_t` for the linear schedule, by a plain loop.
fn alpha_bars() -> Vec<f64> {
    let mut out = vec![1.0];
    for t in 1..=1000 {
        let beta = 1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0;
        out.push(out[t - 1] * (1.0 - beta));
    }
    out
}

fn normal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `eps_hat = a * x + b * t / 1000`.
struct Linear {
    a: f64,
    b: f64,
}

impl NoisePredictor for Linear {
    fn predict(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(x_t.iter().map(|x| self.a * x + self.b * t as f64 / 1000.0).collect())
    }
}

/// Knows the clean image, so it returns the exact noise.
struct Oracle {
    x0: Vec<f64>,
    schedule: NoiseSchedule,
}

impl NoisePredictor for Oracle {
    fn predict(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let (s, n) = (self.schedule.signal(t)?, self.schedule.noise(t)?);
        Ok(x_t.iter().zip(&self.x0).map(|(x, x0)| (x - s * x0) / n).collect())
    }
}

#[test]
fn subsequence_is_strided_and_decreasing() {
    let sched = NoiseSchedule::default();
    let ts = SamplerConfig::default().timesteps(&sched).unwrap();
    assert_eq!(ts.len(), 200);
    assert_eq!((ts[0], ts[1], *ts.last().unwrap()), (1000, 995, 5));
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    let all = SamplerConfig { steps: 1000, ..Default::default() }.timesteps(&sched).unwrap();
    assert_eq!(*all.last().unwrap(), 1);
    assert!(SamplerConfig { steps: 0, ..Default::default() }.timesteps(&sched).is_err());
    assert!(SamplerConfig { eta: 1.5, ..Default::default() }.timesteps(&sched).is_err());
}

#[test]
fn predicted_x0_inverts_the_forward_map() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
    for t in 1..=1000 {
        let eps = normal(48, &mut rng);
        let x_t = sched.forward_diffuse(&x0, t, &eps).unwrap();
        let back = predicted_x0(&sched, &x_t, t, &eps).unwrap();
        let err = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "t={t}: {err:e}");
    }
    let zero = predicted_x0(&sched, &x0, 300, &[0.0; 48]).unwrap();
    let s = sched.signal(300).unwrap();
    assert!(zero.iter().zip(&x0).all(|(a, b)| *a == b / s));
    assert!(predicted_x0(&sched, &x0, 0, &x0).is_err());
}

#[test]
fn predicted_x0_matches_scalar_formula() {
    let sched = NoiseSchedule::default();
    let ab = alpha_bars();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let t = rng.random_range(1..=1000);
        let x = normal(8, &mut rng);
        let e = normal(8, &mut rng);
        let got = predicted_x0(&sched, &x, t, &e).unwrap();
        for i in 0..8 {
            let want = (x[i] - (1.0 - ab[t]).sqrt() * e[i]) / ab[t].sqrt();
            assert!((got[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn oracle_step_to_zero_returns_x0() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    for t in [1, 17, 500, 1000] {
        let eps = normal(32, &mut rng);
        let x_t = sched.forward_diffuse(&x0, t, &eps).unwrap();
        for eta in [0.0, 1.0] {
            let out = ddim_step(&sched, &x_t, t, 0, &eps, eta, &mut rng).unwrap();
            assert!(out.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }
}

#[test]
fn excess_noise_is_rejected() {
    let sched = NoiseSchedule::default();
    let x = vec![0.1; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(ddim_step(&sched, &x, 500, 400, &x, 1.0, &mut rng).is_ok());
    assert!(ddim_step(&sched, &x, 500, 400, &x, 50.0, &mut rng).is_err());
    assert!(ddim_step(&sched, &x, 400, 400, &x, 0.0, &mut rng).is_err());
    assert_eq!(ddim_sigma(&sched, 700, 300, 0.0).unwrap(), 0.0);
}

#[test]
fn deterministic_chain_matches_scalar_oracle_and_ignores_the_rng() {
    let sched = NoiseSchedule::default();
    let ab = alpha_bars();
    let model = Linear { a: 0.3, b: -0.2 };
    let cfg = SamplerConfig::default();
    let ts = cfg.timesteps(&sched).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x_big_t = normal(16, &mut rng);

    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = x_big_t.clone();
        for (i, &t) in ts.iter().enumerate() {
            let prev = ts.get(i + 1).copied().unwrap_or(0);
            let e = model.predict(&x, t).unwrap();
            x = ddim_step(&sched, &x, t, prev, &e, 0.0, &mut rng).unwrap();
        }
        x
    };
    let a = run(10);
    let b = run(99);
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));

    for (k, &start) in x_big_t.iter().enumerate() {
        let mut x = start;
        for (i, &t) in ts.iter().enumerate() {
            let prev = ts.get(i + 1).copied().unwrap_or(0);
            let e = 0.3 * x - 0.2 * t as f64 / 1000.0;
            let x0 = (x - (1.0 - ab[t]).sqrt() * e) / ab[t].sqrt();
            x = ab[prev].sqrt() * x0 + (1.0 - ab[prev]).sqrt() * e;
        }
        assert!((x - a[k]).abs() < 1e-6 * (1.0 + x.abs()), "{x} vs {}", a[k]);
    }
}

#[test]
fn sampling_is_seeded_and_records_every_step() {
    let sched = NoiseSchedule::default();
    let model = Linear { a: 0.5, b: 0.1 };
    for eta in [0.0, 0.7] {
        let cfg = SamplerConfig { steps: 50, eta, seed: 12 };
        let a = sample(&model, 27, &sched, &cfg).unwrap();
        let b = sample(&model, 27, &sched, &cfg).unwrap();
        assert_eq!(a.trajectory.len(), 50);
        assert_eq!(a.timesteps.len(), 50);
        assert!(a.image.iter().zip(&b.image).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.image.iter().all(|v| (-1.0..=1.0).contains(v)));
        let c = sample(&model, 27, &sched, &SamplerConfig { seed: 13, ..cfg }).unwrap();
        assert_ne!(a.image, c.image);
    }
}

#[test]
fn oracle_sampling_reaches_the_clean_image() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-0.9..0.9)).collect();
    let oracle = Oracle { x0: x0.clone(), schedule: sched.clone() };
    let out = sample(&oracle, 12, &sched, &SamplerConfig { steps: 20, eta: 1.0, seed: 3 }).unwrap();
    assert!(out.image.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-6));
    for frame in &out.trajectory {
        assert!(frame.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

#[test]
fn single_pass_estimate_is_exact_for_the_oracle_and_seeded() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    let oracle = Oracle { x0: x0.clone(), schedule: sched.clone() };
    let est = single_pass_estimate(&oracle, &sched, &x0, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert!(est.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-9));
    let model = Linear { a: 0.2, b: 0.0 };
    let p = single_pass_estimate(&model, &sched, &x0, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let q = single_pass_estimate(&model, &sched, &x0, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(p, q);
}
