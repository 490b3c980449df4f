//! The clean-image pass: classification, decoder prediction, refined CAAM,
//! saliency and the fused pseudo-label for one image.

use crate::error::Result;
use crate::explain::{self, SaliencyMap, ScaleMap};
use crate::fusion::{self, FusionConfig, PseudoLabelMap};
use crate::metrics::argmax;
use crate::model::{Network, NUM_CLASSES};
use crate::tensor::{Element, Tape};

#[derive(Debug, Clone)]
pub struct CleanPass {
    pub probs: [f64; NUM_CLASSES],
    /// Class the maps explain.
    pub class_index: usize,
    /// Decoder foreground probability.
    pub decoder: Vec<f64>,
    /// Refined CAAM at input resolution.
    pub caaml: Vec<f64>,
    /// Per-scale CAAMs (Conv3, Conv4, Conv5).
    pub caams: Vec<ScaleMap>,
    /// Per-scale CAMs of every class: `cams[class][scale]`.
    pub cams: Vec<Vec<ScaleMap>>,
    /// `None` when saliency is switched off.
    pub saliency: Option<SaliencyMap>,
    pub saliency_map: Vec<f64>,
}

/// Forward `image` without gradients and build every map. `class_hint`
/// overrides the predicted class as the one to explain. With
/// `ig_steps = None` no saliency is computed and the map is all zeros.
pub fn clean_pass<T: Element>(
    net: &Network,
    image: &[f64],
    size: usize,
    class_hint: Option<usize>,
    ig_steps: Option<usize>,
    multiscale: bool,
) -> Result<CleanPass> {
    let mut tape = Tape::<T>::new();
    let bound = net.bind(&mut tape, false);
    let x = Network::image_leaf(&mut tape, image, (size, size), false)?;
    let mut bundle = net.encoder_forward(&mut tape, &bound, x)?;
    let probs_var = net.classify(&mut tape, &mut bundle, multiscale)?;
    let seg = net.decode(&mut tape, &bound, &bundle)?;
    let p = tape.value_f64(probs_var);
    let probs = [p[0], p[1], p[2]];
    let class_index = class_hint.unwrap_or_else(|| argmax(&probs));
    let caaml = explain::refined_caam(&tape, &bundle, size, size, multiscale)?;
    let caams = explain::caams(&tape, &bundle)?;
    let cams = (0..NUM_CLASSES)
        .map(|c| explain::cams(&tape, &bundle, c))
        .collect::<Result<Vec<_>>>()?;
    let (saliency, saliency_map) = match ig_steps {
        Some(steps) => {
            let baseline = vec![0.0; image.len()];
            let sal = explain::integrated_gradients::<T>(net, image, &baseline, (size, size), class_index, steps, multiscale)?;
            let map = explain::saliency_to_map(&sal);
            (Some(sal), map)
        }
        None => (None, vec![0.0; image.len()]),
    };
    Ok(CleanPass {
        probs,
        class_index,
        decoder: tape.value_f64(seg),
        caaml,
        caams,
        cams,
        saliency,
        saliency_map,
    })
}

impl CleanPass {
    pub fn pseudo_label(&self, size: usize, cfg: &FusionConfig) -> Result<PseudoLabelMap> {
        fusion::combine(&self.caaml, &self.saliency_map, &self.decoder, size, size, cfg)
    }
}
