//! Explanation maps: class activation maps (CAM), class-agnostic activation
//! maps (CAAM), the refined CAAM used for pseudo-labels, and integrated
//! gradients saliency.

use crate::error::{Error, Result};
use crate::model::{ActivationBundle, Network, HEAD_BLOCKS};
use crate::tensor::{Element, Tape};

/// A 2-D map at one encoder scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMap {
    /// Encoder block the map comes from (3, 4 or 5), 0 for input resolution.
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScaleMap {
    pub fn new(scale: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width, "map size");
        ScaleMap {
            scale,
            height,
            width,
            values,
        }
    }
}

/// Signed integrated-gradients attribution per input pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub class_index: usize,
    pub steps: usize,
    pub values: Vec<f64>,
}

/// `CAM_i = sum_k w_k^i f_k` for features `[C,h,w]` and head weights
/// `[classes, C]` (bias excluded).
pub fn compute_cam(scale: usize, features: &[f64], dims: (usize, usize, usize), head_weights: &[f64], class_index: usize) -> Result<ScaleMap> {
    let (c, h, w) = dims;
    if features.len() != c * h * w {
        return Err(Error::shape("compute_cam", c * h * w, features.len()));
    }
    let row = head_weights
        .get(class_index * c..(class_index + 1) * c)
        .ok_or_else(|| Error::Usage(format!("class index {class_index} out of range")))?;
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (f, &wk) in features.chunks_exact(plane).zip(row) {
        out.iter_mut().zip(f).for_each(|(o, &v)| *o += wk * v);
    }
    Ok(ScaleMap::new(scale, h, w, out))
}

/// `CAAM = sum_k f_k`.
pub fn compute_caam(scale: usize, features: &[f64], dims: (usize, usize, usize)) -> Result<ScaleMap> {
    let (c, h, w) = dims;
    if c == 0 || features.len() != c * h * w {
        return Err(Error::shape("compute_caam", c * h * w, features.len()));
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for f in features.chunks_exact(plane) {
        out.iter_mut().zip(f).for_each(|(o, &v)| *o += v);
    }
    Ok(ScaleMap::new(scale, h, w, out))
}

/// Min-max scaling into `[0,1]`; constant maps (range below `1e-12`) map to
/// zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range >= crate::tensor::DEGENERATE_RANGE) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / range).collect()
}

/// Bilinear upsampling of one `[h,w]` plane, same convention as
/// [`Tape::upsample_bilinear`].
pub fn upsample_map(values: &[f64], from: (usize, usize), to: (usize, usize)) -> Result<Vec<f64>> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1, from.0, from.1], values.to_vec(), false)?;
    let y = tape.upsample_bilinear(x, to.0, to.1)?;
    Ok(tape.value(y).to_vec())
}

fn feature_dims<T: Element>(tape: &Tape<T>, bundle: &ActivationBundle, scale: usize) -> (usize, usize, usize) {
    let s = tape.shape(bundle.head_features(scale));
    (s[0], s[1], s[2])
}

/// Head positions (0 = Conv3) used for the given multiscale setting.
pub fn active_scales(multiscale: bool) -> &'static [usize] {
    if multiscale {
        &[0, 1, 2]
    } else {
        &[2]
    }
}

/// CAAM of every head scale from a forward pass.
pub fn caams<T: Element>(tape: &Tape<T>, bundle: &ActivationBundle) -> Result<Vec<ScaleMap>> {
    (0..3)
        .map(|s| compute_caam(HEAD_BLOCKS[s], &tape.value_f64(bundle.head_features(s)), feature_dims(tape, bundle, s)))
        .collect()
}

/// CAM of `class_index` at every head scale from a forward pass.
pub fn cams<T: Element>(tape: &Tape<T>, bundle: &ActivationBundle, class_index: usize) -> Result<Vec<ScaleMap>> {
    (0..3)
        .map(|s| {
            compute_cam(
                HEAD_BLOCKS[s],
                &tape.value_f64(bundle.head_features(s)),
                feature_dims(tape, bundle, s),
                &tape.value_f64(bundle.head_kernels[s]),
                class_index,
            )
        })
        .collect()
}

/// Normalise each map, upsample to `(out_h, out_w)`, normalise again and
/// average. Used for both the refined CAAM and the exported CAM.
pub fn fuse_scale_maps(maps: &[&ScaleMap], out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return Err(Error::Usage("no scale maps to fuse".into()));
    }
    let mut acc = vec![0.0; out_h * out_w];
    for map in maps {
        let up = upsample_map(&map.values, (map.height, map.width), (out_h, out_w))?;
        for (a, v) in acc.iter_mut().zip(minmax_normalize(&up)) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Refined class-agnostic activation map at `(out_h, out_w)`: mean over the
/// active scales of min-max-normalised, bilinearly upsampled CAAMs.
pub fn refined_caam<T: Element>(tape: &Tape<T>, bundle: &ActivationBundle, out_h: usize, out_w: usize, multiscale: bool) -> Result<Vec<f64>> {
    let all = caams(tape, bundle)?;
    let chosen: Vec<&ScaleMap> = active_scales(multiscale).iter().map(|&s| &all[s]).collect();
    fuse_scale_maps(&chosen, out_h, out_w)
}

/// Clamp negative attributions to zero, then min-max normalise.
pub fn saliency_to_map(sal: &SaliencyMap) -> Vec<f64> {
    let clamped: Vec<f64> = sal.values.iter().map(|&v| v.max(0.0)).collect();
    minmax_normalize(&clamped)
}

/// Right Riemann sum of the path integral:
/// `(x_i - x'_i) * (1/t) * sum_{g=1..t} dF/dx_i (x' + g/t (x - x'))`.
///
/// `grad` returns the gradient of the explained scalar at a point.
pub fn integrated_gradients_with(
    image: &[f64],
    baseline: &[f64],
    steps: usize,
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::Usage("integrated gradients needs at least one step".into()));
    }
    if image.len() != baseline.len() {
        return Err(Error::shape("integrated_gradients", image.len(), baseline.len()));
    }
    let mut total = vec![0.0; image.len()];
    let mut point = vec![0.0; image.len()];
    for g in 1..=steps {
        let alpha = g as f64 / steps as f64;
        for ((p, &x), &b) in point.iter_mut().zip(image).zip(baseline) {
            *p = b + alpha * (x - b);
        }
        let dg = grad(&point)?;
        total.iter_mut().zip(dg).for_each(|(t, d)| *t += d);
    }
    let inv = 1.0 / steps as f64;
    Ok(total
        .into_iter()
        .zip(image.iter().zip(baseline))
        .map(|(t, (&x, &b))| (x - b) * t * inv)
        .collect())
}

/// Pre-softmax score of `class_index` (summed over the active heads) and its
/// gradient with respect to the image.
pub fn class_score_and_grad<T: Element>(
    net: &Network,
    image: &[f64],
    size: (usize, usize),
    class_index: usize,
    multiscale: bool,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::<T>::new();
    let bound = net.bind(&mut tape, false);
    let x = Network::image_leaf(&mut tape, image, size, true)?;
    let bundle = net.encoder_forward(&mut tape, &bound, x)?;
    let logits = net.class_logits(&mut tape, &bundle, multiscale)?;
    let score = tape.pick(logits, class_index)?;
    tape.backward(score)?;
    Ok((tape.scalar(score).as_f64(), tape.grad_f64(x)))
}

/// Integrated-gradients saliency of the network's class score `F` for
/// `class_index`, computed in element type `T`.
pub fn integrated_gradients<T: Element>(
    net: &Network,
    image: &[f64],
    baseline: &[f64],
    size: (usize, usize),
    class_index: usize,
    steps: usize,
    multiscale: bool,
) -> Result<SaliencyMap> {
    if class_index >= crate::model::NUM_CLASSES {
        return Err(Error::Usage(format!("class index {class_index} out of range")));
    }
    let values = integrated_gradients_with(image, baseline, steps, |point| {
        class_score_and_grad::<T>(net, point, size, class_index, multiscale).map(|(_, g)| g)
    })?;
    Ok(SaliencyMap {
        height: size.0,
        width: size.1,
        class_index,
        steps,
        values,
    })
}
