use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bumped whenever the generator's output for a given seed changes.
pub const GENERATOR_VERSION: u64 = 1;

const MIN_PRIMITIVES: usize = 2;
const MAX_PRIMITIVES: usize = 5;
const MAX_BOUNDING_RADIUS: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Cuboid,
    Sphere,
    Cylinder,
}

/// One solid in object space (`y` up).
///
/// `extents` are half-sizes: a cuboid uses all three, a sphere uses
/// `extents[0]` as radius, a vertical cylinder uses `extents[0]` as radius and
/// `extents[1]` as half-height. `yaw` rotates cuboids about the vertical axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub extents: [f64; 3],
    pub yaw: f64,
    pub albedo: [u8; 3],
}

impl Primitive {
    pub fn bounding_radius(&self) -> f64 {
        let [a, b, c] = self.extents;
        match self.kind {
            PrimitiveKind::Sphere => a,
            PrimitiveKind::Cuboid => (a * a + b * b + c * c).sqrt(),
            PrimitiveKind::Cylinder => (a * a + b * b).sqrt(),
        }
    }

    /// Cuboid local axes in object space (columns x, y, z).
    pub fn axes(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.yaw.sin_cos();
        [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            primitives: Vec::new(),
        }
    }

    /// True when every primitive lies entirely inside the unit ball.
    pub fn fits_unit_ball(&self) -> bool {
        self.primitives.iter().all(|p| {
            let d = p.center.iter().map(|v| v * v).sum::<f64>().sqrt();
            d + p.bounding_radius() <= 1.0
        })
    }
}

/// Deterministic random object with 2-5 primitives inside the unit ball.
pub fn generate_object(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (GENERATOR_VERSION << 56));
    let count = rng.random_range(MIN_PRIMITIVES..=MAX_PRIMITIVES);
    let primitives = (0..count).map(|_| random_primitive(&mut rng)).collect();
    SceneSpec { seed, primitives }
}

fn random_primitive(rng: &mut ChaCha8Rng) -> Primitive {
    let kind = match rng.random_range(0..3) {
        0 => PrimitiveKind::Cuboid,
        1 => PrimitiveKind::Sphere,
        _ => PrimitiveKind::Cylinder,
    };
    let mut extents = [
        rng.random_range(0.12..0.38),
        rng.random_range(0.12..0.38),
        rng.random_range(0.12..0.38),
    ];
    let mut p = Primitive {
        kind,
        center: [0.0; 3],
        extents,
        yaw: rng.random_range(0.0..std::f64::consts::PI),
        albedo: random_albedo(rng),
    };
    let r = p.bounding_radius();
    if r > MAX_BOUNDING_RADIUS {
        let k = MAX_BOUNDING_RADIUS / r;
        extents.iter_mut().for_each(|e| *e *= k);
        p.extents = extents;
    }
    // uniform direction, distance leaving room for the bounding sphere
    let dir = loop {
        let v = [
            rng.random_range(-1.0..1.0f64),
            rng.random_range(-1.0..1.0f64),
            rng.random_range(-1.0..1.0f64),
        ];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    let room = (1.0 - p.bounding_radius()).max(0.0);
    let dist = rng.random_range(0.0..=1.0f64) * room * 0.6;
    p.center = [dir[0] * dist, dir[1] * dist, dir[2] * dist];
    p
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // saturated colors from a random hue keep primitives distinguishable
    let hue = rng.random_range(0.0..6.0f64);
    let sector = hue.floor() as usize;
    let f = hue - sector as f64;
    let (hi, lo) = (0.9, 0.15);
    let mid_up = lo + (hi - lo) * f;
    let mid_down = hi - (hi - lo) * f;
    let rgb = match sector {
        0 => [hi, mid_up, lo],
        1 => [mid_down, hi, lo],
        2 => [lo, hi, mid_up],
        3 => [lo, mid_down, hi],
        4 => [mid_up, lo, hi],
        _ => [hi, lo, mid_down],
    };
    let v = rng.random_range(0.7..1.0);
    rgb.map(|c| (c * v * 255.0).round() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        assert_eq!(generate_object(42), generate_object(42));
        for seed in 0..10_000 {
            let s = generate_object(seed);
            assert!((2..=5).contains(&s.primitives.len()));
            assert!(s.fits_unit_ball(), "seed {seed}");
        }
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let mut collisions = 0;
        for seed in 0..10_000u64 {
            if generate_object(seed).primitives == generate_object(seed + 1).primitives {
                collisions += 1;
            }
        }
        assert!((collisions as f64) / 10_000.0 < 0.001);
    }
}
