//! Feature matching against renderer-derived correspondences.

use crate::analysis::{geometric_correspondence, match_accuracy, patch_mask, patch_match};
use crate::error::{Error, Result};
use crate::refnet::{Features, RefEncoder};
use crate::synthdata::render::render_view_sized;
use crate::synthdata::{generate_object, object_seed, Dataset, SceneSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMatch {
    pub grid: usize,
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
    pub predicted: Vec<Option<usize>>,
    /// Ground-truth partner of each `a` patch when it lands on `b`'s foreground.
    pub truth: Vec<Option<usize>>,
}

impl ViewMatch {
    pub fn accuracy(&self, tolerance: usize) -> Option<f64> {
        match_accuracy(&self.predicted, &self.truth, self.grid, tolerance)
    }
}

/// Rebuilds the scene of `object` and checks that it renders the stored
/// views, which holds only when `dataset_seed` generated the file.
pub fn recover_scene(dataset: &Dataset, dataset_seed: u64, object: usize) -> Result<SceneSpec> {
    if object >= dataset.n_objects() {
        return Err(Error::invalid(format!("object {object} out of range 0..{}", dataset.n_objects())));
    }
    let spec = generate_object(object_seed(dataset_seed, object));
    let v = dataset.view(object, 0);
    let again = render_view_sized(&spec, v.azimuth, v.elevation, dataset.height, dataset.width);
    if again.rgba != v.rgba {
        return Err(Error::HashMismatch {
            kind: "dataset seed",
            expected: format!("views rendered from seed {dataset_seed}"),
            found: format!("different pixels for object {object}"),
        });
    }
    Ok(spec)
}

fn match_features(
    spec: &SceneSpec,
    dataset: &Dataset,
    encoder: &RefEncoder,
    object: usize,
    (va, vb): (usize, usize),
    (fa, fb): (&Features, &Features),
    layer: usize,
) -> Result<ViewMatch> {
    let cfg = &encoder.config;
    if layer >= fa.grids.len() {
        return Err(Error::invalid(format!("layer {layer} out of range 0..{}", fa.grids.len())));
    }
    let (a, b) = (dataset.view(object, va), dataset.view(object, vb));
    let mask_a = patch_mask(a, cfg.patch);
    let mask_b = patch_mask(b, cfg.patch);
    let predicted = patch_match(&fa.grids[layer], &mask_a, &fb.grids[layer], &mask_b, cfg.dim)?;
    let truth = geometric_correspondence(
        spec,
        (a.azimuth as f64, a.elevation as f64),
        (b.azimuth as f64, b.elevation as f64),
        cfg.image,
        cfg.patch,
    )
    .into_iter()
    .zip(&mask_a)
    .map(|(t, &m)| if m { t.filter(|&j| mask_b[j]) } else { None })
    .collect();
    Ok(ViewMatch { grid: cfg.grid(), mask_a, mask_b, predicted, truth })
}

/// Matches the patches of two views of one object.
pub fn match_views(
    encoder: &RefEncoder,
    dataset: &Dataset,
    dataset_seed: u64,
    object: usize,
    views: (usize, usize),
    layer: usize,
) -> Result<ViewMatch> {
    let spec = recover_scene(dataset, dataset_seed, object)?;
    let f = encoder.features_batch(&[dataset.view(object, views.0), dataset.view(object, views.1)])?;
    match_features(&spec, dataset, encoder, object, views, (&f[0], &f[1]), layer)
}

/// Mean accuracy over every view `v` paired with `v + gap` of each object.
///
/// View pairs whose foreground is too small for matching are skipped.
pub fn encoder_match_accuracy(
    encoder: &RefEncoder,
    dataset: &Dataset,
    dataset_seed: u64,
    objects: &[usize],
    gap: usize,
    layer: usize,
    tolerance: usize,
) -> Result<f64> {
    if layer >= encoder.config.depth {
        return Err(Error::invalid(format!("layer {layer} out of range 0..{}", encoder.config.depth)));
    }
    let v = dataset.views_per_object;
    let mut accs = Vec::new();
    for &o in objects {
        let spec = recover_scene(dataset, dataset_seed, o)?;
        let views: Vec<_> = (0..v).map(|i| dataset.view(o, i)).collect();
        let feats = encoder.features_batch(&views)?;
        for a in 0..v {
            let b = (a + gap) % v;
            match match_features(&spec, dataset, encoder, o, (a, b), (&feats[a], &feats[b]), layer) {
                Ok(m) => accs.extend(m.accuracy(tolerance)),
                Err(Error::InvalidArgument(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if accs.is_empty() {
        return Err(Error::invalid("no view pair had enough foreground to match"));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}
