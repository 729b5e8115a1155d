//! Ground-truth patch correspondences between two renders of one object.

use crate::synthdata::render::{cast, pixel_to_plane, plane_to_pixel, Camera};
use crate::synthdata::{RenderedView, SceneSpec};

/// Depth agreement required for a reprojected point to count as visible.
const VISIBILITY_TOL: f64 = 1e-6;

/// Patch-level foreground: at least half of the patch's pixels are opaque.
pub fn patch_mask(view: &RenderedView, patch: usize) -> Vec<bool> {
    let (gh, gw) = (view.height / patch, view.width / patch);
    let mut counts = vec![0usize; gh * gw];
    for (i, m) in view.mask().into_iter().enumerate() {
        if m {
            let (y, x) = (i / view.width, i % view.width);
            if y / patch < gh && x / patch < gw {
                counts[(y / patch) * gw + x / patch] += 1;
            }
        }
    }
    counts.into_iter().map(|c| 2 * c >= patch * patch).collect()
}

/// For each patch of view `a`, the patch of view `b` showing the same surface
/// point as `a`'s patch center, when that point is visible in `b`.
pub fn geometric_correspondence(
    spec: &SceneSpec,
    a: (f64, f64),
    b: (f64, f64),
    size: usize,
    patch: usize,
) -> Vec<Option<usize>> {
    let cam_a = Camera::new(a.0, a.1);
    let cam_b = Camera::new(b.0, b.1);
    let grid = size / patch;
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            // the patch center sits on the corner shared by its four middle pixels
            let (u0, v0) = pixel_to_plane(r * patch, c * patch, size, size);
            let step = 2.0 / size as f64;
            let u = u0 + step * (patch as f64 - 1.0) / 2.0;
            let v = v0 - step * (patch as f64 - 1.0) / 2.0;
            out.push(cast(spec, &cam_a, u, v).and_then(|hit| {
                let world = cam_a.to_world(hit.point);
                let pb = cam_b.to_camera(world);
                let seen = cast(spec, &cam_b, pb[0], pb[1])?;
                if (seen.point[2] - pb[2]).abs() > VISIBILITY_TOL {
                    return None;
                }
                let (row, col) = plane_to_pixel(pb[0], pb[1], size, size);
                let (pr, pc) = ((row + 0.5) / patch as f64, (col + 0.5) / patch as f64);
                let inside = pr >= 0.0 && pc >= 0.0 && pr < grid as f64 && pc < grid as f64;
                inside.then(|| pr.floor() as usize * grid + pc.floor() as usize)
            }));
        }
    }
    out
}

/// Fraction of `a`-foreground patches with a ground-truth partner whose
/// predicted match lies within Chebyshev distance `tolerance` of it.
pub fn match_accuracy(
    predicted: &[Option<usize>],
    truth: &[Option<usize>],
    grid: usize,
    tolerance: usize,
) -> Option<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        if let (Some(p), Some(t)) = (p, t) {
            total += 1;
            let dr = (p / grid).abs_diff(t / grid);
            let dc = (p % grid).abs_diff(t % grid);
            if dr.max(dc) <= tolerance {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}
