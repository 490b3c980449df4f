//! VGG-style encoder with class-score heads on Conv3/4/5 and a U-shaped
//! decoder with skip connections from Conv1-Conv4.
//!
//! Parameters are stored in `f64` and bound onto a [`Tape`] of any element
//! type for each forward pass.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

pub const NUM_CLASSES: usize = 3;
/// Conv layers per encoder block.
pub const BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
/// Encoder blocks (1-based) carrying a class-score head.
pub const HEAD_BLOCKS: [usize; 3] = [3, 4, 5];
/// Spatial reduction of the full encoder.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub widths: [usize; 5],
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl NetConfig {
    pub fn full() -> Self {
        NetConfig {
            widths: [32, 64, 128, 256, 256],
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }

    pub fn tiny() -> Self {
        NetConfig {
            widths: [8, 16, 32, 64, 64],
            ..Self::full()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Index of a conv layer's kernel in the parameter list; its bias follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvRef(usize);

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Vec<Vec<ConvRef>>,
    heads: [ConvRef; 3],
    decoder: Vec<ConvRef>,
    output: ConvRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Parameters of a [`Network`] recorded as leaves on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, r: ConvRef) -> (Var, Var) {
        (self.vars[r.0], self.vars[r.0 + 1])
    }
}

/// Everything one forward pass exposes for classification, explanation and
/// the losses.
#[derive(Debug, Clone)]
pub struct ActivationBundle {
    pub input_hw: (usize, usize),
    /// Pooled outputs of Conv1..Conv5.
    pub features: [Var; 5],
    /// `[3, h, w]` class score maps at Conv3, Conv4, Conv5.
    pub score_maps: [Var; 3],
    /// Global max pool of each score map.
    pub score_vectors: [Var; 3],
    /// 1x1 head kernels `[3, C, 1, 1]` at Conv3, Conv4, Conv5.
    pub head_kernels: [Var; 3],
    pub logits: Option<Var>,
    pub probs: Option<Var>,
}

impl ActivationBundle {
    /// Feature map feeding the head at position `scale` (0 = Conv3).
    pub fn head_features(&self, scale: usize) -> Var {
        self.features[HEAD_BLOCKS[scale] - 1]
    }
}

fn push_conv(params: &mut Vec<Param>, name: &str, c_out: usize, c_in: usize, k: usize) -> ConvRef {
    let at = params.len();
    params.push(Param {
        name: format!("{name}.weight"),
        shape: vec![c_out, c_in, k, k],
        values: vec![0.0; c_out * c_in * k * k],
    });
    params.push(Param {
        name: format!("{name}.bias"),
        shape: vec![c_out],
        values: vec![0.0; c_out],
    });
    ConvRef(at)
}

fn build_layout(widths: &[usize; 5]) -> (Vec<Param>, Layout) {
    let mut params = Vec::new();
    let mut encoder = Vec::new();
    let mut c_in = 1;
    for (b, (&depth, &width)) in BLOCK_DEPTHS.iter().zip(widths).enumerate() {
        let mut block = Vec::new();
        for l in 0..depth {
            block.push(push_conv(&mut params, &format!("enc{}.{l}", b + 1), width, c_in, 3));
            c_in = width;
        }
        encoder.push(block);
    }
    let heads = HEAD_BLOCKS.map(|b| push_conv(&mut params, &format!("head{b}"), NUM_CLASSES, widths[b - 1], 1));
    // decoder stage at Conv-s resolution takes upsampled deeper features
    // concatenated with the Conv-s skip and returns width_s channels
    let mut decoder = Vec::new();
    let mut deeper = widths[4];
    for s in (0..4).rev() {
        decoder.push(push_conv(&mut params, &format!("dec{}", s + 1), widths[s], deeper + widths[s], 3));
        deeper = widths[s];
    }
    decoder.push(push_conv(&mut params, "dec0", widths[0], widths[0], 3));
    let output = push_conv(&mut params, "out", 1, widths[0], 1);
    (
        params,
        Layout {
            encoder,
            heads,
            decoder,
            output,
        },
    )
}

impl Network {
    /// Fresh network with Kaiming-normal kernels (fan-in, leaky gain) and
    /// zero biases drawn from a seeded stream.
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let (mut params, layout) = build_layout(&config.widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);
        for p in params.iter_mut().filter(|p| p.shape.len() == 4) {
            let fan_in = (p.shape[1] * p.shape[2] * p.shape[3]) as f64;
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            p.values.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Network { config, params, layout }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Parameter index of the kernel of the class head at `scale` (0 = Conv3).
    pub fn head_param(&self, scale: usize) -> usize {
        self.layout.heads[scale].0
    }

    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_f64(&p.shape, &p.values, requires_grad).expect("param shapes are consistent"))
            .collect();
        Bound { vars }
    }

    fn conv_layer<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, r: ConvRef, x: Var) -> Result<Var> {
        let (k, b) = bound.conv(r);
        let y = tape.conv2d(x, k, b, 1, 1)?;
        let y = tape.instance_norm(y, self.config.norm_eps)?;
        Ok(tape.leaky_relu(y, self.config.leaky_slope))
    }

    /// Image leaf of shape `[1, H, W]`.
    pub fn image_leaf<T: Element>(tape: &mut Tape<T>, image: &[f64], size: (usize, usize), requires_grad: bool) -> Result<Var> {
        tape.leaf_f64(&[1, size.0, size.1], image, requires_grad)
    }

    /// Run Conv1..Conv5 (each followed by 2x2 max pooling) and the three
    /// class-score heads.
    pub fn encoder_forward<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<ActivationBundle> {
        let &[1, h, w] = tape.shape(image) else {
            return Err(Error::shape("encoder_forward", "[1,H,W]", format!("{:?}", tape.shape(image))));
        };
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}"
            )));
        }
        let mut x = image;
        let mut features = Vec::with_capacity(5);
        for block in &self.layout.encoder {
            for &layer in block {
                x = self.conv_layer(tape, bound, layer, x)?;
            }
            x = tape.max_pool2d(x, 2)?;
            features.push(x);
        }
        let features: [Var; 5] = features.try_into().expect("five blocks");
        let mut score_maps = Vec::with_capacity(3);
        let mut score_vectors = Vec::with_capacity(3);
        for (&head, &block) in self.layout.heads.iter().zip(&HEAD_BLOCKS) {
            let (k, b) = bound.conv(head);
            let map = tape.conv2d(features[block - 1], k, b, 1, 0)?;
            score_vectors.push(tape.global_max_pool(map)?);
            score_maps.push(map);
        }
        Ok(ActivationBundle {
            input_hw: (h, w),
            features,
            score_maps: score_maps.try_into().expect("three heads"),
            score_vectors: score_vectors.try_into().expect("three heads"),
            head_kernels: self.layout.heads.map(|r| bound.conv(r).0),
            logits: None,
            probs: None,
        })
    }

    /// Summed score vector (pre-softmax). With `multiscale` off only the
    /// Conv5 head contributes.
    pub fn class_logits<T: Element>(&self, tape: &mut Tape<T>, bundle: &ActivationBundle, multiscale: bool) -> Result<Var> {
        if multiscale {
            tape.add_all(&bundle.score_vectors)
        } else {
            Ok(bundle.score_vectors[2])
        }
    }

    /// Class probabilities; also stored on the bundle.
    pub fn classify<T: Element>(&self, tape: &mut Tape<T>, bundle: &mut ActivationBundle, multiscale: bool) -> Result<Var> {
        let logits = self.class_logits(tape, bundle, multiscale)?;
        let probs = tape.softmax(logits)?;
        bundle.logits = Some(logits);
        bundle.probs = Some(probs);
        Ok(probs)
    }

    /// Per-pixel foreground probability `[H, W]` at input resolution.
    pub fn decode<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, bundle: &ActivationBundle) -> Result<Var> {
        let mut x = bundle.features[4];
        for (stage, s) in (0..4).rev().enumerate() {
            let skip = bundle.features[s];
            let (_, sh, sw) = dims(tape, skip);
            let up = tape.upsample_bilinear(x, sh, sw)?;
            let cat = tape.concat(&[up, skip])?;
            x = self.conv_layer(tape, bound, self.layout.decoder[stage], cat)?;
        }
        let (h, w) = bundle.input_hw;
        let up = tape.upsample_bilinear(x, h, w)?;
        x = self.conv_layer(tape, bound, self.layout.decoder[4], up)?;
        let (k, b) = bound.conv(self.layout.output);
        let logit = tape.conv2d(x, k, b, 1, 0)?;
        let prob = tape.sigmoid(logit);
        let flat = tape.channel_sum(prob)?;
        Ok(flat)
    }

    /// Write the checkpoint layout described in [`write_params`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|msg| Error::format(path, msg))
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(NET_MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for w in self.config.widths {
            out.write_all(&(w as u32).to_le_bytes())?;
        }
        out.write_all(&self.config.leaky_slope.to_le_bytes())?;
        out.write_all(&self.config.norm_eps.to_le_bytes())?;
        write_params(out, self.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice(), p.values.as_slice())))
    }

    pub fn read_from(input: &mut impl Read) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != NET_MAGIC {
            return Err("not a network checkpoint (bad magic)".into());
        }
        let version = read_u32(input)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}"));
        }
        let mut widths = [0usize; 5];
        for w in &mut widths {
            *w = read_u32(input)? as usize;
        }
        let config = NetConfig {
            widths,
            leaky_slope: read_f64(input)?,
            norm_eps: read_f64(input)?,
        };
        let mut net = Network::new(config, 0);
        let loaded = read_params(input)?;
        net.assign(loaded)?;
        Ok(net)
    }

    /// Replace parameter values from `(name, shape, values)` records, which
    /// must match this network's layout exactly.
    pub(crate) fn assign(&mut self, loaded: Vec<Param>) -> std::result::Result<(), String> {
        if loaded.len() != self.params.len() {
            return Err(format!("expected {} parameters, found {}", self.params.len(), loaded.len()));
        }
        for (p, l) in self.params.iter_mut().zip(loaded) {
            if p.name != l.name || p.shape != l.shape {
                return Err(format!("parameter {} {:?} does not match {} {:?}", l.name, l.shape, p.name, p.shape));
            }
            p.values = l.values;
        }
        Ok(())
    }
}

fn dims<T: Element>(tape: &Tape<T>, v: Var) -> (usize, usize, usize) {
    let s = tape.shape(v);
    (s[0], s[1], s[2])
}

const NET_MAGIC: &[u8; 4] = b"CLBN";
pub(crate) const FORMAT_VERSION: u32 = 1;

/// Parameter block layout, all integers little-endian:
///
/// ```text
/// u32 count
/// count x { u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dim, prod(dim) x f64 }
/// ```
pub(crate) fn write_params<'a>(
    out: &mut impl Write,
    params: impl ExactSizeIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
) -> std::io::Result<()> {
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, shape, values) in params {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) fn read_params(input: &mut impl Read) -> std::result::Result<Vec<Param>, String> {
    let count = read_u32(input)? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        if name_len > 4096 {
            return Err("corrupt parameter name length".into());
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(|e| e.to_string())?;
        let name = String::from_utf8(name).map_err(|e| e.to_string())?;
        let ndim = read_u32(input)? as usize;
        if ndim > 8 {
            return Err(format!("corrupt rank {ndim} for {name}"));
        }
        let shape = (0..ndim).map(|_| read_u32(input).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(format!("corrupt size for {name}"));
        }
        let values = (0..n).map(|_| read_f64(input)).collect::<std::result::Result<Vec<_>, _>>()?;
        params.push(Param { name, shape, values });
    }
    Ok(params)
}

pub(crate) fn read_u32(input: &mut impl Read) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|e| format!("truncated checkpoint: {e}"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(input: &mut impl Read) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b).map_err(|e| format!("truncated checkpoint: {e}"))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(input: &mut impl Read) -> std::result::Result<f64, String> {
    read_u64(input).map(f64::from_bits)
}
