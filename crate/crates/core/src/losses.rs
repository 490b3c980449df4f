//! Training objectives, all built on the tape so they can be differentiated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::active_scales;
use crate::fusion::FusionConfig;
use crate::model::ActivationBundle;
use crate::tensor::{Element, Tape, Var};

/// Probability floor for the classification log.
pub const CE_FLOOR: f64 = 1e-12;
/// Probability clamp for both binary cross-entropies.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Per-scale CAM-loss weights for Conv3, Conv4, Conv5.
    pub alpha: [f64; 3],
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    /// Fixed foreground/background weight; `None` derives it per batch.
    pub bce_weight: Option<f64>,
    /// Weight for the consistency term; `None` reuses the supervised one.
    pub consistency_weight: Option<f64>,
    pub fusion: FusionConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: [5.0; 3],
            beta: 1.0,
            gamma: 5.0,
            eta: 5.0,
            bce_weight: None,
            consistency_weight: None,
            fusion: FusionConfig::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha[0], self.alpha[1], self.alpha[2], self.beta, self.gamma, self.eta];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        for w in [self.bce_weight, self.consistency_weight].into_iter().flatten() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("bce weight must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

/// `clamp(N_fg / N_bg, 0.01, 1)` over a batch of binary masks; 1 when there
/// is no background.
pub fn balance_weight<'a>(masks: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let (mut fg, mut bg) = (0usize, 0usize);
    for m in masks {
        for &v in m {
            if v >= 0.5 {
                fg += 1;
            } else {
                bg += 1;
            }
        }
    }
    if bg == 0 {
        return 1.0;
    }
    (fg as f64 / bg as f64).clamp(0.01, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Warmup,
    Full,
}

/// `-ln p[target]` with `p` floored at `1e-12`.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, probs: Var, target: usize) -> Result<Var> {
    let p = tape.pick(probs, target)?;
    let p = tape.clamp(p, CE_FLOOR, 1.0);
    let ln = tape.ln(p);
    Ok(tape.affine(ln, -1.0, 0.0))
}

/// Mean absolute difference of the min-max-normalised maps.
pub fn cam_distance<T: Element>(tape: &mut Tape<T>, caam: Var, cam: Var) -> Result<Var> {
    if tape.shape(caam) != tape.shape(cam) {
        return Err(Error::Usage(format!(
            "cam_distance shapes differ: {:?} vs {:?}",
            tape.shape(caam),
            tape.shape(cam)
        )));
    }
    let a = tape.minmax_normalize(caam);
    let b = tape.minmax_normalize(cam);
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Pieces of the multiscale classification objective.
#[derive(Debug, Clone, Copy)]
pub struct CamLoss {
    pub cross_entropy: Var,
    /// `sum_s alpha_s L_cam^s`, absent when the CAM term is ablated.
    pub cam_terms: Option<Var>,
    pub total: Var,
}

/// `sum_s alpha_s L_cam^s + L_ce`; `probs` must come from the same bundle.
#[allow(clippy::too_many_arguments)]
pub fn multiscale_cam_loss<T: Element>(
    tape: &mut Tape<T>,
    bundle: &ActivationBundle,
    probs: Var,
    target: usize,
    weights: &LossWeights,
    ablate_cam: bool,
    ablate_multiscale: bool,
) -> Result<CamLoss> {
    let ce = cross_entropy(tape, probs, target)?;
    if ablate_cam {
        return Ok(CamLoss {
            cross_entropy: ce,
            cam_terms: None,
            total: ce,
        });
    }
    let mut terms = Vec::with_capacity(3);
    for &s in active_scales(!ablate_multiscale) {
        let features = bundle.head_features(s);
        let caam = tape.channel_sum(features)?;
        let cam = tape.channel_combine(features, bundle.head_kernels[s], target)?;
        let dist = cam_distance(tape, caam, cam)?;
        terms.push(tape.affine(dist, weights.alpha[s], 0.0));
    }
    let cam_terms = tape.add_all(&terms)?;
    let total = tape.add(cam_terms, ce)?;
    Ok(CamLoss {
        cross_entropy: ce,
        cam_terms: Some(cam_terms),
        total,
    })
}

/// `mean(-y ln F - w (1 - y) ln(1 - F))` with `F` clamped to
/// `[1e-7, 1 - 1e-7]`. `target` may be soft.
pub fn weighted_bce<T: Element>(tape: &mut Tape<T>, pred: Var, target: &[f64], w: f64) -> Result<Var> {
    let n = tape.value(pred).len();
    if target.len() != n {
        return Err(Error::shape("weighted_bce", n, target.len()));
    }
    let f = tape.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let ln_f = tape.ln(f);
    let one_minus = tape.affine(f, -1.0, 1.0);
    let ln_g = tape.ln(one_minus);
    let pos: Vec<f64> = target.iter().map(|&y| -y).collect();
    let neg: Vec<f64> = target.iter().map(|&y| -w * (1.0 - y)).collect();
    let a = tape.mul_const(ln_f, &pos)?;
    let b = tape.mul_const(ln_g, &neg)?;
    let both = tape.add(a, b)?;
    Ok(tape.mean(both))
}

/// Supervised segmentation loss against a binary mask.
pub fn weighted_bce_supervised<T: Element>(tape: &mut Tape<T>, pred: Var, mask: &[f64], w: f64) -> Result<Var> {
    weighted_bce(tape, pred, mask, w)
}

/// Consistency loss of the augmented-view prediction against the soft
/// pseudo-label foreground channel.
pub fn consistency_loss<T: Element>(tape: &mut Tape<T>, pred_on_augmented: Var, pseudo_fg: &[f64], w: f64) -> Result<Var> {
    weighted_bce(tape, pred_on_augmented, pseudo_fg, w)
}

/// `beta CAM_loss + gamma L_s` in warm-up, plus `eta L_u` in the full phase.
pub fn total_objective<T: Element>(
    tape: &mut Tape<T>,
    cam_loss: Var,
    supervised: Var,
    unsupervised: Option<Var>,
    weights: &LossWeights,
    phase: Phase,
) -> Result<Var> {
    let mut terms = vec![tape.affine(cam_loss, weights.beta, 0.0), tape.affine(supervised, weights.gamma, 0.0)];
    if let (Phase::Full, Some(u)) = (phase, unsupervised) {
        terms.push(tape.affine(u, weights.eta, 0.0));
    }
    tape.add_all(&terms)
}

/// Scalar form of [`total_objective`].
pub fn total_value(cam_loss: f64, supervised: f64, unsupervised: f64, weights: &LossWeights, phase: Phase) -> f64 {
    let base = weights.beta * cam_loss + weights.gamma * supervised;
    match phase {
        Phase::Warmup => base,
        Phase::Full => base + weights.eta * unsupervised,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.scalar(v)
    }

    fn leaf(t: &mut Tape<f64>, v: &[f64]) -> Var {
        t.leaf(&[v.len()], v.to_vec(), true).unwrap()
    }

    #[test]
    fn cross_entropy_values() {
        let ce = |p: &[f64], y| {
            eval(|t| {
                let v = leaf(t, p);
                cross_entropy(t, v, y).unwrap()
            })
        };
        assert_eq!(ce(&[0.0, 1.0, 0.0], 1), 0.0);
        assert!((ce(&[1.0 / 3.0; 3], 0) - 3f64.ln()).abs() < 1e-12);
        assert!((ce(&[0.2, 0.2, 0.6], 2) - 0.51083).abs() < 1e-5);
        assert!((ce(&[1.0, 0.0, 0.0], 2) - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cam_distance_values() {
        let dist = |a: &[f64], b: &[f64]| {
            eval(|t| {
                let x = leaf(t, a);
                let y = leaf(t, b);
                cam_distance(t, x, y).unwrap()
            })
        };
        assert_eq!(dist(&[0.2, 0.9, 0.4], &[0.2, 0.9, 0.4]), 0.0);
        assert_eq!(dist(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(dist(&[3.0, 1.0, 2.0], &[0.0, 5.0, 1.0]), dist(&[0.0, 5.0, 1.0], &[3.0, 1.0, 2.0]));
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1.0, 2.0]);
        let y = leaf(&mut t, &[1.0, 2.0, 3.0]);
        assert!(matches!(cam_distance(&mut t, x, y), Err(Error::Usage(_))));
    }

    #[test]
    fn bce_values() {
        let bce = |f: &[f64], y: &[f64], w| {
            eval(|t| {
                let v = leaf(t, f);
                weighted_bce_supervised(t, v, y, w).unwrap()
            })
        };
        assert!(bce(&[1.0], &[1.0], 1.0) < 1e-6);
        assert!((bce(&[0.5], &[0.0], 1.0) - 2f64.ln()).abs() < 1e-12);
        assert!((bce(&[0.5], &[0.0], 2.0) - 1.38629).abs() < 1e-5);
        let cons = eval(|t| {
            let v = leaf(t, &[0.5]);
            consistency_loss(t, v, &[0.5], 1.0).unwrap()
        });
        assert!((cons - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn consistency_gradient_vanishes_at_target() {
        for y in [0.1, 0.37, 0.5, 0.92] {
            let mut t = Tape::<f64>::new();
            let f = leaf(&mut t, &[y]);
            let l = consistency_loss(&mut t, f, &[y], 1.0).unwrap();
            let entropy = -(y * y.ln() + (1.0 - y) * (1.0 - y).ln());
            assert!((t.scalar(l) - entropy).abs() < 1e-12);
            t.backward(l).unwrap();
            assert!(t.grad_f64(f)[0].abs() < 1e-9);
        }
    }

    #[test]
    fn objective_phases() {
        let w = LossWeights::default();
        assert_eq!(total_value(1.0, 1.0, 1.0, &w, Phase::Warmup), 6.0);
        assert_eq!(total_value(1.0, 1.0, 1.0, &w, Phase::Full), 11.0);
        assert_eq!(total_value(0.0, 0.0, 0.0, &w, Phase::Full), 0.0);
        let no_eta = LossWeights { eta: 0.0, ..w };
        assert_eq!(total_value(0.7, 0.2, 3.0, &no_eta, Phase::Full), total_value(0.7, 0.2, 3.0, &no_eta, Phase::Warmup));
        let tape_full = eval(|t| {
            let a = leaf(t, &[1.0]);
            let a = t.sum(a);
            total_objective(t, a, a, Some(a), &w, Phase::Full).unwrap()
        });
        assert_eq!(tape_full, 11.0);
    }

    #[test]
    fn balance_weight_clamps() {
        let m = [1.0, 0.0, 0.0, 0.0];
        assert!((balance_weight([&m[..]]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(balance_weight([&[0.0; 1000][..]]), 0.01);
        assert_eq!(balance_weight([&[1.0, 1.0, 0.0][..]]), 1.0);
        assert_eq!(balance_weight([&[1.0][..]]), 1.0);
    }
}
