//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction. [`Graph::backward`] replays it in reverse and adds the
//! resulting gradients into the leaves that were created with
//! `requires_grad`. Calling it twice without [`Graph::zero_grad`] adds twice.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation.
///
/// `backward` receives the input values, the forward output and the
/// upstream gradient, and returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    BoxSum {
        x: Var,
        window: usize,
    },
    Diff {
        x: Var,
        axis: usize,
    },
    Warp {
        img: Var,
        field: Var,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Tape of recorded operations for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds an input tensor to the tape.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::config(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv3d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.needs(&inputs);
        Ok(self.push(out, rg, Op::Conv3d { x, w, b, stride, pad }))
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let out = kernels::conv_transpose3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.needs(&inputs);
        Ok(self.push(out, rg, Op::ConvTranspose3d { x, w, b, stride }))
    }

    pub fn maxpool3d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool3d(self.value(x), window, stride)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::MaxPool3d { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&values)?;
        let channels = values.iter().map(|t| t.shape()[1]).collect();
        let rg = self.needs(inputs);
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let out = zip(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = map(self.value(x), |v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = map(self.value(x), |v| v + c);
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::AddScalar(x))
    }

    /// Sum of all elements, accumulated in index order.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Windowed neighbourhood sum with zero padding.
    pub fn box_sum(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = kernels::box_sum3d(self.value(x), window)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::BoxSum { x, window }))
    }

    /// Forward difference along spatial axis 2, 3 or 4.
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::diff(self.value(x), axis)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::Diff { x, axis }))
    }

    /// Trilinear resampling of `img` at `p + field(p)`.
    pub fn warp(&mut self, img: Var, field: Var) -> Result<Var> {
        let out = kernels::warp(self.value(img), self.value(field))?;
        let rg = self.needs(&[img, field]);
        Ok(self.push(out, rg, Op::Warp { img, field }))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomOp>) -> Var {
        let rg = self.needs(inputs);
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Back-propagates from a scalar `root`, adding gradients into every
    /// `requires_grad` leaf that `root` depends on.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.input_grads(i, &g)?;
            if contributions.is_empty() && matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
                continue;
            }
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d { x, w, b, stride, pad } => {
                let gr = kernels::conv3d_backward(val(*x), val(*w), g, *stride, *pad, rg(*x), rg(*w))?;
                let mut out = Vec::new();
                out.extend(gr.input.map(|t| (*x, t)));
                out.extend(gr.weight.map(|t| (*w, t)));
                out.extend(b.map(|b| (b, gr.bias)));
                out
            }
            Op::ConvTranspose3d { x, w, b, stride } => {
                let gr = kernels::conv_transpose3d_backward(val(*x), val(*w), g, *stride, rg(*x), rg(*w))?;
                let mut out = Vec::new();
                out.extend(gr.input.map(|t| (*x, t)));
                out.extend(gr.weight.map(|t| (*w, t)));
                out.extend(b.map(|b| (b, gr.bias)));
                out
            }
            Op::MaxPool3d { x, argmax } => {
                vec![(*x, kernels::maxpool3d_backward(val(*x).shape(), argmax, g))]
            }
            Op::Relu(x) => vec![(*x, zip(val(*x), g, |v, g| if v > 0.0 { g } else { 0.0 }))],
            Op::Concat { inputs, channels } => inputs
                .iter()
                .copied()
                .zip(kernels::split_channels(g, channels))
                .collect(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |v| -v))],
            Op::Mul(a, b) => vec![(*a, zip(g, val(*b), |g, y| g * y)), (*b, zip(g, val(*a), |g, x| g * x))],
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = zip(g, bv, |g, y| g / y);
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect(),
                )?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, map(g, |v| v * c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::BoxSum { x, window } => vec![(*x, kernels::box_sum3d(g, *window)?)],
            Op::Diff { x, axis } => vec![(*x, kernels::diff_backward(val(*x).shape(), *axis, g))],
            Op::Warp { img, field } => {
                let (gi, gf) = kernels::warp_backward(val(*img), val(*field), g, rg(*img), rg(*field))?;
                let mut out = Vec::new();
                out.extend(gi.map(|t| (*img, t)));
                out.extend(gf.map(|t| (*field, t)));
                out
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = rule.backward(&vals, &node.value, g);
                if grads.len() != inputs.len() {
                    return Err(Error::Usage(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        rule.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&v, g)| g.map(|g| (v, g)))
                    .collect()
            }
        };
        Ok(out)
    }
}
