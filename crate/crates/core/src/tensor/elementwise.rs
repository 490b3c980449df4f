//! Pointwise maps, channel reductions and scalar reductions.

use super::{Element, GradSink, Node, Op, Tape, Var};
use crate::error::{Error, Result};

impl<T: Element> Tape<T> {
    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(input).iter().map(|&v| f(v)).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, op)
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                what,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        self.unary(
            input,
            |v| if v >= T::zero() { v } else { v * s },
            Op::LeakyRelu { input, slope: s },
        )
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(
            input,
            |v| {
                // split by sign so exp never overflows
                if v >= T::zero() {
                    (T::one() + (-v).exp()).recip()
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid { input },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        self.unary(input, |v| v * s + t, Op::Affine { input, scale: s })
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, input: Var, factor: &[f64]) -> Result<Var> {
        if factor.len() != self.value(input).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} factors", self.value(input).len()),
                format!("{}", factor.len()),
            ));
        }
        let factor: Vec<T> = factor.iter().map(|&f| T::from_f64_lossy(f)).collect();
        let out = self.value(input).iter().zip(&factor).map(|(&x, &f)| x * f).collect();
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::MulConst { input, factor }))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, T::abs, Op::Abs(input))
    }

    /// Natural log. Callers clamp first where inputs may reach zero.
    pub fn ln(&mut self, input: Var) -> Var {
        self.unary(input, T::ln, Op::Ln(input))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        self.unary(input, |v| v.max(lo).min(hi), Op::Clamp { input, lo, hi })
    }

    /// Single element of a flat array as a scalar.
    pub fn pick(&mut self, input: Var, at: usize) -> Result<Var> {
        let Some(&v) = self.value(input).get(at) else {
            return Err(Error::Usage(format!(
                "pick index {at} out of range for shape {:?}",
                self.shape(input)
            )));
        };
        Ok(self.push(vec![1], vec![v], Op::Pick { input, at }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).iter().copied().sum::<T>();
        self.push(vec![1], vec![total], Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = T::from_usize(x.len().max(1)).expect("length converts");
        let m = x.iter().copied().sum::<T>() / n;
        self.push(vec![1], vec![m], Op::Mean(input))
    }

    /// Sum of scalars (or equal-shaped arrays) in order.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Usage("add_all needs at least one term".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Concatenate `[C_i,H,W]` arrays along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Usage("concat needs at least one input".into()));
        };
        let spatial = self.shape(first)[1..].to_vec();
        let mut channels = 0;
        for &v in inputs {
            let shape = self.shape(v);
            if shape.len() != 3 || shape[1..] != spatial[..] {
                return Err(Error::shape(
                    "concat",
                    format!("[_, {}, {}]", spatial[0], spatial.get(1).copied().unwrap_or(0)),
                    format!("{shape:?}"),
                ));
            }
            channels += shape[0];
        }
        let mut out = Vec::with_capacity(channels * spatial.iter().product::<usize>());
        for &v in inputs {
            out.extend_from_slice(self.value(v));
        }
        let mut shape = vec![channels];
        shape.extend(spatial);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// `[C,H,W] -> [H,W]` by summing over channels.
    pub fn channel_sum(&mut self, input: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::shape("channel_sum", "[C,H,W]", format!("{:?}", self.shape(input))));
        };
        let plane = h * w;
        let x = self.value(input);
        let mut out = vec![T::zero(); plane];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&x[ch * plane..(ch + 1) * plane]) {
                *o += v;
            }
        }
        Ok(self.push(vec![h, w], out, Op::ChannelSum { input }))
    }

    /// `[C,H,W] -> [H,W]` weighted by row `row` of a `[R, C, 1, 1]` (or
    /// `[R, C]`) weight array: `sum_k weights[row, k] * features[k]`.
    pub fn channel_combine(&mut self, features: Var, weights: Var, row: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(features) else {
            return Err(Error::shape("channel_combine", "[C,H,W]", format!("{:?}", self.shape(features))));
        };
        let wshape = self.shape(weights);
        let rows = wshape.first().copied().unwrap_or(0);
        if rows <= row || wshape.iter().skip(1).product::<usize>() != c {
            return Err(Error::shape(
                "channel_combine",
                format!("weights [> {row}, {c}, ...]"),
                format!("{wshape:?}"),
            ));
        }
        let plane = h * w;
        let x = self.value(features);
        let wrow = &self.value(weights)[row * c..(row + 1) * c];
        let mut out = vec![T::zero(); plane];
        for (ch, &wk) in wrow.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&x[ch * plane..(ch + 1) * plane]) {
                *o += wk * v;
            }
        }
        Ok(self.push(
            vec![h, w],
            out,
            Op::ChannelCombine {
                features,
                weights,
                row,
            },
        ))
    }
}

pub(super) fn backward<T: Element>(sink: &mut GradSink<'_, T>, node: &Node<T>, op: &Op<T>, upstream: &[T]) {
    let nodes = sink.nodes;
    match op {
        Op::LeakyRelu { input, slope } => {
            let x = &nodes[input.0].value;
            if let Some(g) = sink.slot(*input) {
                for ((g, &d), &v) in g.iter_mut().zip(upstream).zip(x) {
                    *g += if v >= T::zero() { d } else { d * *slope };
                }
            }
        }
        Op::Sigmoid { input } => {
            if let Some(g) = sink.slot(*input) {
                for ((g, &d), &y) in g.iter_mut().zip(upstream).zip(&node.value) {
                    *g += d * y * (T::one() - y);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(g) = sink.slot(v) {
                    g.iter_mut().zip(upstream).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = sink.slot(*a) {
                g.iter_mut().zip(upstream).for_each(|(g, &d)| *g += d);
            }
            if let Some(g) = sink.slot(*b) {
                g.iter_mut().zip(upstream).for_each(|(g, &d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(g) = sink.slot(*a) {
                for ((g, &d), &v) in g.iter_mut().zip(upstream).zip(xb) {
                    *g += d * v;
                }
            }
            if let Some(g) = sink.slot(*b) {
                for ((g, &d), &v) in g.iter_mut().zip(upstream).zip(xa) {
                    *g += d * v;
                }
            }
        }
        Op::Affine { input, scale } => {
            if let Some(g) = sink.slot(*input) {
                g.iter_mut().zip(upstream).for_each(|(g, &d)| *g += d * *scale);
            }
        }
        Op::MulConst { input, factor } => {
            if let Some(g) = sink.slot(*input) {
                for ((g, &d), &f) in g.iter_mut().zip(upstream).zip(factor) {
                    *g += d * f;
                }
            }
        }
        Op::Abs(input) => {
            let x = &nodes[input.0].value;
            if let Some(g) = sink.slot(*input) {
                for ((g, &d), &v) in g.iter_mut().zip(upstream).zip(x) {
                    if v > T::zero() {
                        *g += d;
                    } else if v < T::zero() {
                        *g -= d;
                    }
                }
            }
        }
        Op::Ln(input) => {
            let x = &nodes[input.0].value;
            if let Some(g) = sink.slot(*input) {
                for ((g, &d), &v) in g.iter_mut().zip(upstream).zip(x) {
                    *g += d / v;
                }
            }
        }
        Op::Clamp { input, lo, hi } => {
            let x = &nodes[input.0].value;
            if let Some(g) = sink.slot(*input) {
                for ((g, &d), &v) in g.iter_mut().zip(upstream).zip(x) {
                    if v >= *lo && v <= *hi {
                        *g += d;
                    }
                }
            }
        }
        Op::Pick { input, at } => {
            if let Some(g) = sink.slot(*input) {
                g[*at] += upstream[0];
            }
        }
        Op::Sum(input) => {
            if let Some(g) = sink.slot(*input) {
                g.iter_mut().for_each(|g| *g += upstream[0]);
            }
        }
        Op::Mean(input) => {
            if let Some(g) = sink.slot(*input) {
                let n = T::from_usize(g.len().max(1)).expect("length converts");
                let d = upstream[0] / n;
                g.iter_mut().for_each(|g| *g += d);
            }
        }
        Op::Concat { inputs } => {
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.len();
                if let Some(g) = sink.slot(v) {
                    g.iter_mut()
                        .zip(&upstream[offset..offset + len])
                        .for_each(|(g, &d)| *g += d);
                }
                offset += len;
            }
        }
        Op::ChannelSum { input } => {
            let plane = upstream.len();
            if let Some(g) = sink.slot(*input) {
                for chunk in g.chunks_exact_mut(plane) {
                    chunk.iter_mut().zip(upstream).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::ChannelCombine {
            features,
            weights,
            row,
        } => {
            let plane = upstream.len();
            let x = &nodes[features.0].value;
            let c = x.len() / plane;
            let wrow = &nodes[weights.0].value[row * c..(row + 1) * c];
            if let Some(g) = sink.slot(*features) {
                for (chunk, &wk) in g.chunks_exact_mut(plane).zip(wrow) {
                    chunk.iter_mut().zip(upstream).for_each(|(g, &d)| *g += d * wk);
                }
            }
            if let Some(g) = sink.slot(*weights) {
                for (k, xk) in x.chunks_exact(plane).enumerate() {
                    g[row * c + k] += xk.iter().zip(upstream).map(|(&a, &d)| a * d).sum::<T>();
                }
            }
        }
        _ => unreachable!("dispatched elsewhere"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values_and_slope() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[2], vec![2.0, -1.0], true).unwrap();
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(y), &[2.0, -0.01]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_f64(x), vec![1.0, 0.01]);
    }

    #[test]
    fn channel_combine_weights() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(&[2, 1, 2], vec![1.0, 2.0, 3.0, 5.0], true).unwrap();
        let w = tape.leaf(&[1, 2, 1, 1], vec![2.0, -1.0], true).unwrap();
        let cam = tape.channel_combine(f, w, 0).unwrap();
        assert_eq!(tape.value(cam), &[-1.0, -1.0]);
        let caam = tape.channel_sum(f).unwrap();
        assert_eq!(tape.value(caam), &[4.0, 7.0]);
    }

    #[test]
    fn concat_stacks_channels() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&[1, 1, 2], vec![1.0, 2.0], true).unwrap();
        let b = tape.leaf(&[2, 1, 2], vec![3.0, 4.0, 5.0, 6.0], true).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 1, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = tape.leaf(&[1, 2, 1], vec![0.0, 0.0], false).unwrap();
        assert!(tape.concat(&[a, bad]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[3], vec![-800.0, 0.0, 800.0], false).unwrap();
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y), &[0.0, 0.5, 1.0]);
    }
}
