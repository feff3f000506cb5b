use std::fmt;

use super::ops::{self, Unary};
use super::spatial::{self, Conv2dGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in op set.
///
/// `backward` receives the forward input values in the order they were
/// passed to [`Tape::custom`], the forward output and the upstream gradient,
/// and returns one optional gradient per input.
pub trait Function {
    fn name(&self) -> &str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Flip(Var, usize),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    PadReplicate(Var, usize),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool2d(Var),
    Bilinear(Var),
    CrossEntropy {
        logits: Var,
        dlogits: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Permute(a, _)
            | Reshape(a)
            | Flip(a, _)
            | Unary(a, _)
            | Sum(a)
            | Mean(a)
            | PadReplicate(a, _)
            | AdaptiveAvgPool2d(a)
            | Bilinear(a) => {
                vec![*a]
            }
            Slice { x, .. } | MaxPool2d { x, .. } => vec![*x],
            Concat(vs, _) => vs.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2d { x, w, b, .. } | ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            CrossEntropy { logits, .. } => vec![*logits],
            Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Matmul(..) => "matmul",
            Permute(..) => "permute",
            Reshape(..) => "reshape",
            Concat(..) => "concat",
            Slice { .. } => "slice",
            Flip(..) => "flip_axis",
            Unary(_, u) => u.name(),
            Sum(..) => "sum",
            Mean(..) => "mean",
            LayerNorm { .. } => "layernorm",
            Conv2d { .. } => "conv2d",
            ConvTranspose2d { .. } => "conv2d_transpose",
            PadReplicate(..) => "pad_replicate",
            MaxPool2d { .. } => "maxpool2d",
            AdaptiveAvgPool2d(..) => "adaptive_avgpool2d",
            Bilinear(..) => "bilinear_resize",
            CrossEntropy { .. } => "softmax_cross_entropy",
            Custom { func, .. } => func.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once. Operations whose inputs
/// do not require gradients are stored as constants.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients of a scalar with respect to every gradient-requiring leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a [`Function`] whose forward value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, func: Box<dyn Function>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients from fan-out are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (v, dv) in self.op_backward(node, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(dv.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn op_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let db = ops::reduce_to(g, val(*b).shape());
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Sub(a, b) => {
                let db = ops::reduce_to(g, val(*b).shape()).map(|x| -x);
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Mul(a, b) => {
                let (da, db) = ops::mul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Matmul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Permute(a, axes) => vec![(*a, ops::permute_data(g, &ops::invert(axes)))],
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
            Op::Concat(vs, axis) => {
                let sizes: Vec<usize> = vs.iter().map(|v| val(*v).shape()[*axis]).collect();
                ops::split_data(g, *axis, &sizes)
                    .into_iter()
                    .zip(vs)
                    .map(|(t, v)| (*v, t))
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                vec![(*x, ops::unslice(g, val(*x).shape(), *axis, *start))]
            }
            Op::Flip(a, axis) => vec![(*a, ops::flip_data(g, *axis))],
            Op::Unary(a, u) => vec![(*a, u.backward(val(*a), out, g))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let x = val(*a);
                let n = x.numel().max(1) as f64;
                vec![(*a, Tensor::full(x.shape(), g.data()[0] / n))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (dx, dg, db) = ops::layernorm_backward(val(*gamma), xhat, rstd, g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = spatial::conv2d_backward(val(*x), val(*w), *geom, g);
                let mut r = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    r.push((*b, db));
                }
                r
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = spatial::conv_transpose2d_backward(val(*x), val(*w), *geom, g);
                let mut r = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    r.push((*b, db));
                }
                r
            }
            Op::PadReplicate(a, pad) => {
                vec![(
                    *a,
                    spatial::pad_replicate_backward(val(*a).shape(), *pad, g),
                )]
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                vec![(*x, dx)]
            }
            Op::AdaptiveAvgPool2d(a) => {
                vec![(*a, spatial::adaptive_avgpool2d_backward(val(*a).shape(), g))]
            }
            Op::Bilinear(a) => vec![(*a, spatial::bilinear_backward(val(*a).shape(), g))],
            Op::CrossEntropy { logits, dlogits } => {
                let s = g.data()[0];
                let d = dlogits.iter().map(|x| x * s).collect();
                vec![(*logits, Tensor::new(val(*logits).shape(), d)?)]
            }
            Op::Custom { inputs, func } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let grads = func.backward(&ins, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::arg(
                        "custom backward",
                        format!(
                            "`{}` returned {} gradients for {} inputs",
                            func.name(),
                            grads.len(),
                            inputs.len()
                        ),
                    ));
                }
                let mut r = Vec::new();
                for (v, dv) in inputs.iter().zip(grads) {
                    if let Some(dv) = dv {
                        if dv.shape() != val(*v).shape() {
                            return Err(Error::shape(
                                "custom backward",
                                dv.shape(),
                                val(*v).shape(),
                            ));
                        }
                        r.push((*v, dv));
                    }
                }
                r
            }
        })
    }
}
