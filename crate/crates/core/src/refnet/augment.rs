//! Paired augmentations with known patch correspondence.

use rand::Rng;

/// Geometric and photometric transform of a square planar RGB image.
///
/// Continuous coordinates put pixel `i`'s center at `i + 0.5`. Augmented
/// coordinate `a` reads source coordinate `offset + scale * a`, mirrored
/// horizontally when `flip` is set. Offsets are multiples of the patch size so
/// patch centers map onto patch centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub scale: f64,
    pub offset: (f64, f64),
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub gain: [f32; 3],
}

impl Augment {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        offset: (0.0, 0.0),
        flip: false,
        brightness: 0.0,
        contrast: 1.0,
        gain: [1.0; 3],
    };

    /// Random whole-patch shift, optional 2x crop-resize, flip and color jitter.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, size: usize, patch: usize, allow_zoom: bool) -> Self {
        let p = patch as f64;
        let grid = (size / patch) as i64;
        let zoom = allow_zoom && rng.random_bool(0.5);
        let (scale, offset) = if zoom {
            let half = grid / 2;
            let oy = rng.random_range(0..=grid - half) as f64 * p;
            let ox = rng.random_range(0..=grid - half) as f64 * p;
            (0.5, (oy, ox))
        } else {
            let m = (grid / 4).max(1);
            let oy = rng.random_range(-m..=m) as f64 * p;
            let ox = rng.random_range(-m..=m) as f64 * p;
            (1.0, (oy, ox))
        };
        Self {
            scale,
            offset,
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(-0.2..0.2),
            contrast: rng.random_range(0.8..1.2),
            gain: [
                rng.random_range(0.9..1.1),
                rng.random_range(0.9..1.1),
                rng.random_range(0.9..1.1),
            ],
        }
    }

    fn source_coord(&self, size: usize, ay: f64, ax: f64) -> (f64, f64) {
        let sy = self.offset.0 + self.scale * ay;
        let sx = self.offset.1 + self.scale * ax;
        let sx = if self.flip { size as f64 - sx } else { sx };
        (sy, sx)
    }

    /// Applies the transform to planar `[3, size, size]` pixels in `[-1, 1]`.
    /// Samples outside the source read as white.
    pub fn apply(&self, src: &[f32], size: usize) -> Vec<f32> {
        let hw = size * size;
        let mut out = vec![1.0f32; 3 * hw];
        for y in 0..size {
            for x in 0..size {
                let (sy, sx) = self.source_coord(size, y as f64 + 0.5, x as f64 + 0.5);
                let (iy, ix) = (sy.floor(), sx.floor());
                let inside = iy >= 0.0 && ix >= 0.0 && iy < size as f64 && ix < size as f64;
                for c in 0..3 {
                    let v = if inside {
                        src[c * hw + iy as usize * size + ix as usize]
                    } else {
                        1.0
                    };
                    let v = (v * self.contrast + self.brightness) * self.gain[c];
                    out[c * hw + y * size + x] = v.clamp(-1.0, 1.0);
                }
            }
        }
        out
    }

    /// Source patch `(row, col)` seen at the center of augmented token `(r, c)`.
    pub fn source_patch(&self, size: usize, patch: usize, r: usize, c: usize) -> Option<(usize, usize)> {
        let half = patch as f64 / 2.0;
        let (sy, sx) = self.source_coord(size, (r * patch) as f64 + half, (c * patch) as f64 + half);
        let grid = (size / patch) as f64;
        let (pr, pc) = ((sy / patch as f64).floor(), (sx / patch as f64).floor());
        (pr >= 0.0 && pc >= 0.0 && pr < grid && pc < grid).then_some((pr as usize, pc as usize))
    }

    /// Augmented token whose center reads source patch `(pr, pc)`'s center.
    /// Only defined for unit scale.
    pub fn token_of_source(&self, size: usize, patch: usize, pr: usize, pc: usize) -> Option<usize> {
        debug_assert_eq!(self.scale, 1.0);
        let half = patch as f64 / 2.0;
        let sy = (pr * patch) as f64 + half;
        let sx = (pc * patch) as f64 + half;
        let sx = if self.flip { size as f64 - sx } else { sx };
        let ay = (sy - self.offset.0) / self.scale;
        let ax = (sx - self.offset.1) / self.scale;
        let grid = size / patch;
        let (r, c) = ((ay / patch as f64).floor(), (ax / patch as f64).floor());
        let inside = r >= 0.0 && c >= 0.0 && r < grid as f64 && c < grid as f64;
        inside.then(|| r as usize * grid + c as usize)
    }

    /// `(student token, teacher token)` pairs viewing the same source patch.
    pub fn correspondences(student: &Self, teacher: &Self, size: usize, patch: usize) -> Vec<(usize, usize)> {
        let grid = size / patch;
        let mut pairs = Vec::new();
        for r in 0..grid {
            for c in 0..grid {
                if let Some((pr, pc)) = student.source_patch(size, patch, r, c) {
                    if let Some(t) = teacher.token_of_source(size, patch, pr, pc) {
                        pairs.push((r * grid + c, t));
                    }
                }
            }
        }
        pairs
    }
}
