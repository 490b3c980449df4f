//! Calibrated pseudo-labels: each source map is expanded to a two-class
//! pair, scaled by a global norm, soft-maxed per pixel, mixed convexly and
//! sharpened with a temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fusion weights and switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight of the refined CAAM.
    pub lambda: f64,
    /// Weight of the saliency map.
    pub mu: f64,
    /// Weight of the decoder prediction.
    pub nu: f64,
    pub temperature: f64,
    pub sharpen: bool,
    /// Rescale the three weights to sum to one.
    pub renormalize_weights: bool,
    /// Drop the saliency source entirely (its weight and its share of the norm).
    pub use_saliency: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: 0.3,
            mu: 0.4,
            nu: 0.4,
            temperature: 0.5,
            sharpen: true,
            renormalize_weights: true,
            use_saliency: true,
        }
    }
}

impl FusionConfig {
    /// The `(λ, μ, ν)` actually applied.
    pub fn effective_weights(&self) -> Result<[f64; 3]> {
        let mu = if self.use_saliency { self.mu } else { 0.0 };
        let raw = [self.lambda, mu, self.nu];
        if raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("fusion weights must be nonnegative, got {raw:?}")));
        }
        if !self.renormalize_weights {
            return Ok(raw);
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("fusion weights sum to zero".into()));
        }
        Ok(raw.map(|w| w / total))
    }
}

/// Where a pseudo-label came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub raw_weights: [f64; 3],
    pub effective_weights: [f64; 3],
    pub temperature: f64,
    pub sharpened: bool,
    pub used_saliency: bool,
    pub norm: f64,
    /// All sources were zero and the uniform label was substituted.
    pub degenerate: bool,
}

/// Per-pixel (foreground, background) distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    pub pairs: Vec<[f64; 2]>,
    pub provenance: Provenance,
}

impl PseudoLabelMap {
    pub fn foreground(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p[0]).collect()
    }
}

/// `sqrt(sum_i c_i^2 + s_i^2 + p_i^2)` over every pixel of every map.
pub fn norm3(maps: &[&[f64]]) -> Result<f64> {
    if let Some(first) = maps.first() {
        if maps.iter().any(|m| m.len() != first.len()) {
            return Err(Error::shape("norm3", first.len(), maps.iter().map(|m| m.len()).max().unwrap_or(0)));
        }
    }
    let total: f64 = maps.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all fusion sources are zero".into()));
    }
    Ok(total.sqrt())
}

/// `a_i^(1/T) / sum_j a_j^(1/T)`.
pub fn sharpen(dist: &[f64], temperature: f64) -> Vec<f64> {
    let inv = 1.0 / temperature;
    let max = dist.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![1.0 / dist.len() as f64; dist.len()];
    }
    // dividing by the max first keeps small temperatures from underflowing
    let powered: Vec<f64> = dist.iter().map(|&a| (a / max).powf(inv)).collect();
    let total: f64 = powered.iter().sum();
    powered.into_iter().map(|a| a / total).collect()
}

/// Two-class softmax of `pair / norm`.
pub fn scaled_pair_softmax(pair: [f64; 2], norm: f64) -> [f64; 2] {
    let (a, b) = (pair[0] / norm, pair[1] / norm);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

/// Fuse one pixel given each source's class pair. `temperature = None`
/// skips sharpening; the mixture is still renormalised onto the simplex.
pub fn fuse_pixel(pairs: &[[f64; 2]], weights: &[f64], norm: f64, temperature: Option<f64>) -> [f64; 2] {
    let mut mix = [0.0; 2];
    for (pair, &w) in pairs.iter().zip(weights) {
        let q = scaled_pair_softmax(*pair, norm);
        mix[0] += w * q[0];
        mix[1] += w * q[1];
    }
    let out = sharpen(&mix, temperature.unwrap_or(1.0));
    [out[0], out[1]]
}

/// Fuse the refined CAAM `c`, saliency `s` and decoder prediction `p`
/// (all in `[0,1]`, same shape) into a pseudo-label.
pub fn combine(c: &[f64], s: &[f64], p: &[f64], height: usize, width: usize, cfg: &FusionConfig) -> Result<PseudoLabelMap> {
    let n = height * width;
    for m in [c, s, p] {
        if m.len() != n {
            return Err(Error::shape("combine", n, m.len()));
        }
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let weights = cfg.effective_weights()?;
    let sources: Vec<&[f64]> = if cfg.use_saliency { vec![c, s, p] } else { vec![c, p] };
    let source_weights: Vec<f64> = if cfg.use_saliency {
        weights.to_vec()
    } else {
        vec![weights[0], weights[2]]
    };
    let mut provenance = Provenance {
        raw_weights: [cfg.lambda, cfg.mu, cfg.nu],
        effective_weights: weights,
        temperature: cfg.temperature,
        sharpened: cfg.sharpen,
        used_saliency: cfg.use_saliency,
        norm: 0.0,
        degenerate: false,
    };
    let norm = match norm3(&sources) {
        Ok(v) => v,
        Err(Error::Degenerate(msg)) => {
            log::warn!("{msg}; substituting a uniform pseudo-label");
            provenance.degenerate = true;
            return Ok(PseudoLabelMap {
                height,
                width,
                pairs: vec![[0.5, 0.5]; n],
                provenance,
            });
        }
        Err(e) => return Err(e),
    };
    provenance.norm = norm;
    let temperature = cfg.sharpen.then_some(cfg.temperature);
    let mut pairs = Vec::with_capacity(n);
    let mut px = Vec::with_capacity(sources.len());
    for i in 0..n {
        px.clear();
        px.extend(sources.iter().map(|m| [m[i], 1.0 - m[i]]));
        pairs.push(fuse_pixel(&px, &source_weights, norm, temperature));
    }
    Ok(PseudoLabelMap {
        height,
        width,
        pairs,
        provenance,
    })
}
