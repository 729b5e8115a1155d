use rand::Rng;

use super::container::Dataset;

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_degrees(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Relative camera motion from a reference view to a target view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub d_azimuth: f64,
    pub d_elevation: f64,
}

impl RelativePose {
    pub const IDENTITY: Self = Self {
        d_azimuth: 0.0,
        d_elevation: 0.0,
    };

    /// Pose taking `(azimuth, elevation)` of `from` to that of `to`.
    pub fn between(from: (f64, f64), to: (f64, f64)) -> Self {
        Self {
            d_azimuth: wrap_degrees(to.0 - from.0),
            d_elevation: to.1 - from.1,
        }
    }

    pub fn compose(self, next: Self) -> Self {
        Self {
            d_azimuth: wrap_degrees(self.d_azimuth + next.d_azimuth),
            d_elevation: self.d_elevation + next.d_elevation,
        }
    }

    pub fn inverse(self) -> Self {
        Self {
            d_azimuth: wrap_degrees(-self.d_azimuth),
            d_elevation: -self.d_elevation,
        }
    }

    /// Conditioning vector `(Δazimuth, Δelevation)` in radians.
    pub fn to_vector(self) -> [f64; 2] {
        [self.d_azimuth.to_radians(), self.d_elevation.to_radians()]
    }
}

/// A (target, reference) pair of views of one object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPair {
    pub object: usize,
    pub target: usize,
    pub reference: usize,
    pub pose: RelativePose,
}

impl ViewPair {
    pub fn new(dataset: &Dataset, object: usize, target: usize, reference: usize) -> Self {
        let t = dataset.view(object, target);
        let r = dataset.view(object, reference);
        let pose = RelativePose::between(
            (r.azimuth as f64, r.elevation as f64),
            (t.azimuth as f64, t.elevation as f64),
        );
        Self {
            object,
            target,
            reference,
            pose,
        }
    }
}

/// Uniform over objects in `objects`, then uniform over ordered view pairs.
///
/// Target and reference differ unless `allow_identical` is set, in which case
/// all `V * V` ordered pairs are equally likely.
pub fn sample_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    objects: &[usize],
    allow_identical: bool,
    rng: &mut R,
) -> ViewPair {
    assert!(!objects.is_empty(), "sample_pair needs at least one object");
    let object = objects[rng.random_range(0..objects.len())];
    let v = dataset.views_per_object;
    let target = rng.random_range(0..v);
    let reference = if allow_identical || v == 1 {
        rng.random_range(0..v)
    } else {
        let r = rng.random_range(0..v - 1);
        if r >= target {
            r + 1
        } else {
            r
        }
    };
    ViewPair::new(dataset, object, target, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_boundaries() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(360.0), 0.0);
    }

    #[test]
    fn thirty_to_one_twenty_is_ninety() {
        let p = RelativePose::between((30.0, 30.0), (120.0, 30.0));
        assert_eq!(p.d_azimuth, 90.0);
        assert_eq!(p.d_elevation, 0.0);
    }

    proptest! {
        #[test]
        fn antisymmetric(a in 0.0..360.0f64, b in 0.0..360.0f64, ea in -60.0..60.0f64, eb in -60.0..60.0f64) {
            let ab = RelativePose::between((a, ea), (b, eb));
            let ba = RelativePose::between((b, eb), (a, ea));
            let back = ab.compose(ba);
            prop_assert!(back.d_azimuth.abs() < 1e-9);
            prop_assert!(back.d_elevation.abs() < 1e-12);
            prop_assert!((ab.d_azimuth - ba.inverse().d_azimuth).abs() < 1e-9);
        }
    }
}
