//! Normalising operations: instance norm, softmax and min-max scaling.

use super::{Element, GradSink, Node, Op, Tape, Var};
use crate::error::{Error, Result};

/// Ranges below this are treated as constant maps by [`Tape::minmax_normalize`].
pub const DEGENERATE_RANGE: f64 = 1e-12;

impl<T: Element> Tape<T> {
    /// Per-channel `(x - mean) / sqrt(var + eps)` over the spatial axes of
    /// `[C,H,W]`, with biased variance and no affine parameters.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::shape("instance_norm", "[C,H,W]", format!("{:?}", self.shape(input))));
        };
        if h * w == 0 || eps <= 0.0 {
            return Err(Error::Usage("instance_norm needs H*W >= 1 and eps > 0".into()));
        }
        let plane = h * w;
        let count = T::from_usize(plane).expect("plane size converts");
        let eps = T::from_f64_lossy(eps);
        let x = self.value(input);
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(c);
        for chunk in x.chunks_exact(plane) {
            let mean = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = (var + eps).sqrt().recip();
            out.extend(chunk.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        Ok(self.push(vec![c, h, w], out, Op::InstanceNorm { input, inv_std }))
    }

    /// Numerically stable softmax over a 1-D array.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        if self.shape(input).len() != 1 {
            return Err(Error::shape("softmax", "[C]", format!("{:?}", self.shape(input))));
        }
        let x = self.value(input);
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().copied().sum::<T>();
        let out = exps.into_iter().map(|e| e / total).collect();
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::Softmax { input }))
    }

    /// `(x - min) / (max - min)` over the whole array. A range below
    /// [`DEGENERATE_RANGE`] yields all zeros with zero gradient.
    pub fn minmax_normalize(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in x.iter().enumerate() {
            if v < x[argmin] {
                argmin = i;
            }
            if v > x[argmax] {
                argmax = i;
            }
        }
        let shape = self.shape(input).to_vec();
        let (lo, hi) = (x[argmin], x[argmax]);
        let range = hi - lo;
        if range.as_f64() < DEGENERATE_RANGE {
            let zeros = vec![T::zero(); x.len()];
            return self.push(
                shape,
                zeros,
                Op::MinMax {
                    input,
                    argmin,
                    argmax,
                    range: T::zero(),
                },
            );
        }
        let out = x.iter().map(|&v| (v - lo) / range).collect();
        self.push(
            shape,
            out,
            Op::MinMax {
                input,
                argmin,
                argmax,
                range,
            },
        )
    }
}

pub(super) fn instance_norm_backward<T: Element>(
    sink: &mut GradSink<'_, T>,
    node: &Node<T>,
    upstream: &[T],
    input: Var,
    inv_std: &[T],
) {
    let Some(gx) = sink.slot(input) else { return };
    let plane = node.shape[1] * node.shape[2];
    let count = T::from_usize(plane).expect("plane size converts");
    for (ch, &inv) in inv_std.iter().enumerate() {
        let range = ch * plane..(ch + 1) * plane;
        let y = &node.value[range.clone()];
        let dy = &upstream[range.clone()];
        let mean_dy = dy.iter().copied().sum::<T>() / count;
        let mean_dy_y = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / count;
        for ((g, &d), &yv) in gx[range].iter_mut().zip(dy).zip(y) {
            *g += inv * (d - mean_dy - yv * mean_dy_y);
        }
    }
}

pub(super) fn softmax_backward<T: Element>(sink: &mut GradSink<'_, T>, node: &Node<T>, upstream: &[T], input: Var) {
    let Some(gx) = sink.slot(input) else { return };
    let dot = upstream.iter().zip(&node.value).map(|(&d, &y)| d * y).sum::<T>();
    for ((g, &d), &y) in gx.iter_mut().zip(upstream).zip(&node.value) {
        *g += y * (d - dot);
    }
}

pub(super) fn minmax_backward<T: Element>(
    sink: &mut GradSink<'_, T>,
    node: &Node<T>,
    upstream: &[T],
    input: Var,
    argmin: usize,
    argmax: usize,
    range: T,
) {
    if range == T::zero() {
        return;
    }
    let Some(gx) = sink.slot(input) else { return };
    let inv = range.recip();
    let mut to_min = T::zero();
    let mut to_max = T::zero();
    for ((g, &d), &y) in gx.iter_mut().zip(upstream).zip(&node.value) {
        *g += d * inv;
        to_min += d * (y - T::one()) * inv;
        to_max -= d * y * inv;
    }
    gx[argmin] += to_min;
    gx[argmax] += to_max;
}
