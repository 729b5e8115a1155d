//! Feature analytics, evaluation metrics and plot output.

pub mod correspondence;
pub mod image;
pub mod pca;
pub mod plot;

use crate::error::{Error, Result};
use crate::refnet::{Features, RefEncoder};

pub use correspondence::{geometric_correspondence, match_accuracy, patch_mask};
pub use pca::PcaBasis;

pub const MIN_FOREGROUND: usize = 4;
const GRAY: u8 = 128;

fn token_rows(grid: &[f32], dim: usize) -> Vec<Vec<f64>> {
    grid.chunks_exact(dim).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Per-view PCA of the foreground tokens of a `tokens x dim` grid.
fn foreground_basis(rows: &[Vec<f64>], mask: &[bool]) -> Result<PcaBasis> {
    let fg: Vec<&[f64]> = rows.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r.as_slice()).collect();
    if fg.len() < MIN_FOREGROUND {
        return Err(Error::invalid(format!(
            "{} foreground patches, at least {MIN_FOREGROUND} required",
            fg.len()
        )));
    }
    PcaBasis::fit(&fg, 3)
}

/// Colors each patch by its first three principal components.
///
/// Components are min-max scaled to 0..=255 over the foreground; a component
/// without spread renders as 128. Background patches are black.
pub fn pca_visualize(grid: &[f32], dim: usize, mask: &[bool]) -> Result<Vec<[u8; 3]>> {
    let rows = token_rows(grid, dim);
    if rows.len() != mask.len() {
        return Err(Error::shape("pca_visualize", format!("{} tokens, {} mask entries", rows.len(), mask.len())));
    }
    let basis = foreground_basis(&rows, mask)?;
    let proj: Vec<Option<Vec<f64>>> = rows
        .iter()
        .zip(mask)
        .map(|(r, &m)| m.then(|| basis.project(r)))
        .collect();
    let k = basis.components.len();
    let mut lo = vec![f64::INFINITY; 3];
    let mut hi = vec![f64::NEG_INFINITY; 3];
    for p in proj.iter().flatten() {
        for c in 0..k {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let spread_floor = 1e-9 * basis.total_variance.sqrt().max(1e-300);
    Ok(proj
        .iter()
        .map(|p| match p {
            None => [0, 0, 0],
            Some(p) => {
                let mut px = [GRAY; 3];
                for c in 0..k {
                    let span = hi[c] - lo[c];
                    if span > spread_floor && basis.variances[c] > 0.0 {
                        px[c] = (255.0 * (p[c] - lo[c]) / span).round().clamp(0.0, 255.0) as u8;
                    }
                }
                px
            }
        })
        .collect())
}

/// PCA-condensed 3-vectors of the foreground tokens, `None` for background.
pub fn condensed(grid: &[f32], dim: usize, mask: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
    let rows = token_rows(grid, dim);
    if rows.len() != mask.len() {
        return Err(Error::shape("patch_match", format!("{} tokens, {} mask entries", rows.len(), mask.len())));
    }
    let basis = foreground_basis(&rows, mask)?;
    Ok(rows.iter().zip(mask).map(|(r, &m)| m.then(|| basis.project(r))).collect())
}

/// Nearest-neighbor matching between per-view PCA-condensed patch features.
///
/// For each foreground patch of `a`, returns the index of the closest
/// foreground patch of `b` in Euclidean distance; ties go to the lowest index.
pub fn patch_match(a: &[f32], mask_a: &[bool], b: &[f32], mask_b: &[bool], dim: usize) -> Result<Vec<Option<usize>>> {
    if !mask_a.iter().any(|&m| m) || !mask_b.iter().any(|&m| m) {
        return Err(Error::invalid("patch matching needs foreground in both views"));
    }
    let ca = condensed(a, dim, mask_a)?;
    let cb = condensed(b, dim, mask_b)?;
    Ok(match_condensed(&ca, &cb))
}

/// Matching step of [`patch_match`] on already condensed features.
pub fn match_condensed(ca: &[Option<Vec<f64>>], cb: &[Option<Vec<f64>>]) -> Vec<Option<usize>> {
    ca.iter()
        .map(|pa| {
            let pa = pa.as_ref()?;
            let mut best: Option<(f64, usize)> = None;
            for (j, pb) in cb.iter().enumerate() {
                let Some(pb) = pb else { continue };
                let d: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            best.map(|(_, j)| j)
        })
        .collect()
}

/// Mean squared error between two equally shaped images.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("mse", format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Mean per-token L2 distance between the patch grids of two feature sets.
pub fn feature_distance(fa: &Features, fb: &Features, dim: usize) -> Result<f64> {
    if fa.grids.len() != fb.grids.len() || fa.grids.iter().zip(&fb.grids).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::shape("feat_dist", "feature layouts differ"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (ga, gb) in fa.grids.iter().zip(&fb.grids) {
        for (ta, tb) in ga.chunks_exact(dim).zip(gb.chunks_exact(dim)) {
            let d: f64 = ta.iter().zip(tb).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
            total += d.sqrt();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Perceptual proxy: [`feature_distance`] of the frozen encoder's features of
/// two planar `[3, H, W]` images in `[-1, 1]`.
pub fn feat_dist(a: &[f32], b: &[f32], encoder: &RefEncoder) -> Result<f64> {
    if !encoder.frozen {
        return Err(Error::invalid("feat_dist requires a frozen encoder"));
    }
    if a.len() != b.len() {
        return Err(Error::shape("feat_dist", format!("{} vs {} values", a.len(), b.len())));
    }
    let mut both = a.to_vec();
    both.extend_from_slice(b);
    let f = encoder.features_from_pixels(&both, 2)?;
    feature_distance(&f[0], &f[1], encoder.config.dim)
}

/// Batched [`feat_dist`] over aligned lists of images.
pub fn feat_dist_batch(a: &[Vec<f32>], b: &[Vec<f32>], encoder: &RefEncoder) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape("feat_dist", "image lists differ in length"));
    }
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let n = a.len();
    let pixels: Vec<f32> = a.iter().chain(b).flatten().copied().collect();
    let f = encoder.features_from_pixels(&pixels, 2 * n)?;
    (0..n).map(|i| feature_distance(&f[i], &f[n + i], encoder.config.dim)).collect()
}
