//! Tape-based reverse-mode differentiation over dense row-major arrays.
//!
//! Only the operations the network, the explanation maps and the losses need
//! are provided. Every operation is a method on [`Tape`] that records a node
//! and returns a [`Var`] handle; [`Tape::backward`] replays the tape in
//! reverse from a scalar.
//!
//! The tape is generic over the scalar [`Element`] so gradient checks can run
//! in `f64` while training runs in `f32`.

mod conv;
mod elementwise;
pub mod gradcheck;
mod norm;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::conv_output_size;
pub use norm::DEGENERATE_RANGE;

/// Scalar type the engine computes in.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and
    /// `op(b)` of shape `k x n`, all row-major. `trans_*` selects a transposed
    /// read of the stored matrix.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        beta: Self,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("element converts to f64")
    }
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // stored matrix is rows x cols when not transposed, cols x rows otherwise
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                // SAFETY: the slices were bounds-checked above against the
                // logical extents implied by the strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Handle to an array recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        cols: Vec<T>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Upsample {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    ChannelSum {
        input: Var,
    },
    ChannelCombine {
        features: Var,
        weights: Var,
        row: usize,
    },
    MinMax {
        input: Var,
        argmin: usize,
        argmax: usize,
        range: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    MulConst {
        input: Var,
        factor: Vec<T>,
    },
    Abs(Var),
    Ln(Var),
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Pick {
        input: Var,
        at: usize,
    },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::ChannelCombine {
                features, weights, ..
            } => vec![*features, *weights],
            Op::Concat { inputs } => inputs.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MaxPool2d { input, .. }
            | Op::GlobalMaxPool { input, .. }
            | Op::InstanceNorm { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::Softmax { input }
            | Op::Upsample { input }
            | Op::ChannelSum { input }
            | Op::MinMax { input, .. }
            | Op::Affine { input, .. }
            | Op::MulConst { input, .. }
            | Op::Clamp { input, .. }
            | Op::Pick { input, .. } => vec![*input],
            Op::Abs(a) | Op::Ln(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
        }
    }
}

pub(crate) struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of operations. Node inputs always precede the node, so the
/// reverse of insertion order is a valid backward schedule.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::shape(
                "leaf",
                format!("{} values", numel(shape)),
                format!("{} values", values.len()),
            ));
        }
        Ok(self.push_raw(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Leaf from `f64` values, converting to the tape element type.
    pub fn leaf_f64(&mut self, shape: &[usize], values: &[f64], requires_grad: bool) -> Result<Var> {
        self.leaf(
            shape,
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
            requires_grad,
        )
    }

    /// Constant copy of `v`: same values, no connection to the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push_raw(shape, value, false, Op::Leaf)
    }

    pub(crate) fn push_raw(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(shape, value, requires_grad, op)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value_f64(&self, v: Var) -> Vec<f64> {
        self.value(v).iter().map(|x| x.as_f64()).collect()
    }

    /// Value of a single-element array.
    pub fn scalar(&self, v: Var) -> T {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1);
        value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as `f64`, zeros if backward never reached `v`.
    pub fn grad_f64(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls;
    /// intermediate gradients are rebuilt on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(upstream) = pending[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &upstream, &mut pending);
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(g) => g.iter_mut().zip(&upstream).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(upstream),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, upstream: &[T], pending: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let mut sink = GradSink {
            nodes: &self.nodes,
            pending,
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
                cols,
            } => conv::conv2d_backward(&mut sink, node, upstream, *input, *kernel, *bias, *stride, *padding, cols),
            Op::MaxPool2d { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                if let Some(g) = sink.slot(*input) {
                    for (&src, &u) in argmax.iter().zip(upstream) {
                        g[src] += u;
                    }
                }
            }
            Op::InstanceNorm { input, inv_std } => norm::instance_norm_backward(&mut sink, node, upstream, *input, inv_std),
            Op::Softmax { input } => norm::softmax_backward(&mut sink, node, upstream, *input),
            Op::MinMax {
                input,
                argmin,
                argmax,
                range,
            } => norm::minmax_backward(&mut sink, node, upstream, *input, *argmin, *argmax, *range),
            Op::Upsample { input } => conv::upsample_backward(&mut sink, node, upstream, *input),
            other => elementwise::backward(&mut sink, node, other, upstream),
        }
    }
}

/// Lazily allocated gradient buffers for the inputs of the node being
/// processed during backward.
pub(crate) struct GradSink<'a, T: Element> {
    nodes: &'a [Node<T>],
    pending: &'a mut [Option<Vec<T>>],
}

impl<T: Element> GradSink<'_, T> {
    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.pending[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }
}
