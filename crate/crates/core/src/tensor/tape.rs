use std::borrow::Cow;

use super::kernels::{self, Activation};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in op set.
///
/// `backward` returns one gradient per input, shaped like that input.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Unary(Var, Activation),
    GlobalAvgPool(Var),
    Add(Var, Var),
    MulChannelwise {
        features: Var,
        scale: Var,
    },
    Stack(Vec<Var>),
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for later reverse-mode differentiation.
///
/// Leaves may borrow their value (parameters) or own it (inputs, cached
/// features). Nodes that no gradient-requiring leaf feeds into are skipped
/// entirely by [`Tape::backward`].
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients produced by a backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            Cow::Owned(out),
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Cow::Owned(out), rg, Op::Dense { input, weight, bias }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = act.forward(self.value(x));
        let rg = self.requires_grad(x);
        self.push(Cow::Owned(out), rg, Op::Unary(x, act))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(Cow::Owned(out), rg, Op::GlobalAvgPool(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Cow::Owned(out), rg, Op::Add(a, b)))
    }

    pub fn mul_channelwise(&mut self, features: Var, scale: Var) -> Result<Var> {
        let out = kernels::mul_channelwise(self.value(features), self.value(scale))?;
        let rg = self.any_grad(&[features, scale]);
        Ok(self.push(Cow::Owned(out), rg, Op::MulChannelwise { features, scale }))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(vars.len() * self.value(*first).numel());
        for &v in vars {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("stack", &shape, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut out_shape = vec![vars.len()];
        out_shape.extend_from_slice(&shape);
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(vars);
        Ok(self.push(Cow::Owned(out), rg, Op::Stack(vars.to_vec())))
    }

    pub fn apply(&mut self, func: impl Function + 'static, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = func.forward(&values)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Cow::Owned(out),
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                func: Box::new(func),
            },
        ))
    }

    /// Gradients of the single-element `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        let shape = self.value(output).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::invalid(format!(
                "backward() needs a scalar output, got shape {shape:?}; use backward_with"
            )));
        }
        self.backward_with(output, Tensor::full(shape, 1.0))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward seed", self.value(output).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let upstream = self.backprop_node(node, &g)?;
            for (v, grad) in upstream {
                if !self.requires_grad(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need = [input, weight, bias].map(|v| self.requires_grad(v));
                let r = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    self.value(bias),
                    stride,
                    padding,
                    g,
                    need,
                )?;
                out.extend(r.input.map(|t| (input, t)));
                out.extend(r.weight.map(|t| (weight, t)));
                out.extend(r.bias.map(|t| (bias, t)));
            }
            &Op::Dense { input, weight, bias } => {
                let need = [input, weight, bias].map(|v| self.requires_grad(v));
                let [dx, dw, db] =
                    kernels::dense_backward(self.value(input), self.value(weight), self.value(bias), g, need)?;
                out.extend(dx.map(|t| (input, t)));
                out.extend(dw.map(|t| (weight, t)));
                out.extend(db.map(|t| (bias, t)));
            }
            &Op::Unary(x, act) => {
                out.push((x, act.backward(self.value(x), &node.value, g)));
            }
            &Op::GlobalAvgPool(x) => {
                out.push((x, kernels::global_avg_pool_backward(self.value(x).shape(), g)));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::MulChannelwise { features, scale } => {
                let need = [features, scale].map(|v| self.requires_grad(v));
                let [df, ds] = kernels::mul_channelwise_backward(self.value(features), self.value(scale), g, need)?;
                out.extend(df.map(|t| (features, t)));
                out.extend(ds.map(|t| (scale, t)));
            }
            Op::Stack(vars) => {
                let chunk = g.numel() / vars.len();
                for (i, &v) in vars.iter().enumerate() {
                    let part = g.data()[i * chunk..(i + 1) * chunk].to_vec();
                    out.push((v, Tensor::new(self.value(v).shape().to_vec(), part)?));
                }
            }
            Op::Custom { inputs, func } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = func.backward(&values, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "{} returned {} gradients for {} inputs",
                        func.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, t) in inputs.iter().zip(gs) {
                    if t.shape() != self.value(v).shape() {
                        return Err(Error::shape(func.name(), self.value(v).shape(), t.shape()));
                    }
                    out.push((v, t));
                }
            }
        }
        Ok(out)
    }
}
