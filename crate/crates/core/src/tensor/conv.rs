//! Spatial operations on `[C, H, W]` arrays: convolution, pooling and
//! bilinear resampling.

use super::{numel, Element, GradSink, Node, Op, Tape, Var};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis, `None` if the kernel does
/// not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visit every (column-matrix index, input index) pair that lies inside
    /// the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.cols();
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * n + oy * self.out_w + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn geometry(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<(ConvGeom, usize)> {
    let (&[c_in, h, w], &[c_out, kc, k, k2]) = (input, kernel) else {
        return Err(Error::shape(
            "conv2d",
            "input [C,H,W] and kernel [Co,Ci,k,k]",
            format!("input {input:?}, kernel {kernel:?}"),
        ));
    };
    if kc != c_in || k != k2 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel [_, {c_in}, k, k]"),
            format!("{kernel:?}"),
        ));
    }
    if k % 2 == 0 {
        // even kernels are only ever used unpadded
        if padding != 0 {
            return Err(Error::Usage("conv2d: even kernels take no padding".into()));
        }
    }
    let (Some(out_h), Some(out_w)) = (
        conv_output_size(h, k, stride, padding),
        conv_output_size(w, k, stride, padding),
    ) else {
        return Err(Error::shape(
            "conv2d",
            format!("spatial size >= {} - 2*{padding}", k),
            format!("{h}x{w}"),
        ));
    };
    Ok((
        ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            padding,
            out_h,
            out_w,
        },
        c_out,
    ))
}

impl<T: Element> Tape<T> {
    /// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,k,k]` plus a
    /// per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (geom, c_out) = geometry(self.shape(input), self.shape(kernel), stride, padding)?;
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("conv2d bias", format!("[{c_out}]"), format!("{:?}", self.shape(bias))));
        }
        let (rows, n) = (geom.rows(), geom.cols());
        let x = self.value(input);
        let cols = if geom.k == 1 && geom.stride == 1 && geom.padding == 0 {
            x.to_vec()
        } else {
            let mut cols = vec![T::zero(); rows * n];
            geom.for_each_tap(|ci, xi| cols[ci] = x[xi]);
            cols
        };
        let mut out = vec![T::zero(); c_out * n];
        for (co, &b) in self.value(bias).iter().enumerate() {
            out[co * n..(co + 1) * n].fill(b);
        }
        T::gemm(c_out, rows, n, self.value(kernel), false, &cols, false, &mut out, T::one());
        let shape = vec![c_out, geom.out_h, geom.out_w];
        // keep the column matrix only when the kernel gradient will need it
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
                cols,
            },
        ))
    }

    /// Non-overlapping max pooling. Ties go to the first element in
    /// row-major window order.
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::shape("max_pool2d", "[C,H,W]", format!("{:?}", self.shape(input))));
        };
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "max_pool2d",
                format!("H and W divisible by {window}"),
                format!("{h}x{w}"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let x = self.value(input);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + oy * window) * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (ch * h + oy * window + dy) * w + ox * window + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2d { input, argmax }))
    }

    /// Per-channel spatial maximum, `[C,H,W] -> [C]`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::shape("global_max_pool", "[C,H,W]", format!("{:?}", self.shape(input))));
        };
        if h * w == 0 {
            return Err(Error::shape("global_max_pool", "H,W >= 1", format!("{h}x{w}")));
        }
        let x = self.value(input);
        let plane = h * w;
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let base = ch * plane;
            let mut best = base;
            for idx in base..base + plane {
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
        Ok(self.push(vec![c], out, Op::GlobalMaxPool { input, argmax }))
    }

    /// Bilinear resampling of `[C,h,w]` to `[C,out_h,out_w]`.
    ///
    /// Half-pixel convention (align-corners off): output pixel `o` samples
    /// source coordinate `s = (o + 0.5) * in / out - 0.5`, clamped to
    /// `[0, in - 1]`, and blends `floor(s)` and `floor(s) + 1` with weight
    /// `s - floor(s)`.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::shape("upsample_bilinear", "[C,h,w]", format!("{:?}", self.shape(input))));
        };
        if out_h < h || out_w < w || h == 0 || w == 0 {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("output at least {h}x{w}"),
                format!("{out_h}x{out_w}"),
            ));
        }
        let ys = taps(h, out_h);
        let xs = taps(w, out_w);
        let x = self.value(input);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let fy = T::from_f64_lossy(fy);
                    let fx = T::from_f64_lossy(fx);
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bottom * fy);
                }
            }
        }
        Ok(self.push(vec![c, out_h, out_w], out, Op::Upsample { input }))
    }
}

/// Source index pair and blend weight for each output position.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Element>(
    sink: &mut GradSink<'_, T>,
    node: &Node<T>,
    upstream: &[T],
    input: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    cols: &[T],
) {
    let (geom, c_out) =
        geometry(sink.shape(input), sink.shape(kernel), stride, padding).expect("validated in forward");
    let (rows, n) = (geom.rows(), geom.cols());
    debug_assert_eq!(numel(&node.shape), c_out * n);
    if let Some(gb) = sink.slot(bias) {
        for (co, g) in gb.iter_mut().enumerate() {
            *g += upstream[co * n..(co + 1) * n].iter().copied().sum::<T>();
        }
    }
    if let Some(gk) = sink.slot(kernel) {
        // dK[Co, rows] += dOut[Co, n] * cols[rows, n]^T
        T::gemm(c_out, n, rows, upstream, false, cols, true, gk, T::one());
    }
    let nodes = sink.nodes;
    let kernel_values = &nodes[kernel.0].value;
    if let Some(gx) = sink.slot(input) {
        let direct = geom.k == 1 && geom.stride == 1 && geom.padding == 0;
        if direct {
            T::gemm(rows, c_out, n, kernel_values, true, upstream, false, gx, T::one());
        } else {
            let mut dcols = vec![T::zero(); rows * n];
            T::gemm(rows, c_out, n, kernel_values, true, upstream, false, &mut dcols, T::zero());
            geom.for_each_tap(|ci, xi| gx[xi] += dcols[ci]);
        }
    }
}

pub(super) fn upsample_backward<T: Element>(sink: &mut GradSink<'_, T>, node: &Node<T>, upstream: &[T], input: Var) {
    let &[c, h, w] = sink.shape(input) else {
        unreachable!("validated in forward")
    };
    let (out_h, out_w) = (node.shape[1], node.shape[2]);
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let Some(gx) = sink.slot(input) else { return };
    let mut it = upstream.iter();
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let g = *it.next().expect("upstream matches output");
                let fy = T::from_f64_lossy(fy);
                let fx = T::from_f64_lossy(fx);
                let (gy0, gy1) = (g * (T::one() - fy), g * fy);
                plane[y0 * w + x0] += gy0 * (T::one() - fx);
                plane[y0 * w + x1] += gy0 * fx;
                plane[y1 * w + x0] += gy1 * (T::one() - fx);
                plane[y1 * w + x1] += gy1 * fx;
            }
        }
    }
}
