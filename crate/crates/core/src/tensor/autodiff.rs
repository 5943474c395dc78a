use super::{ops, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, pad: usize },
    Relu(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Gap(Var),
    Concat(Vec<Var>),
    Fc { input: Var, weight: Var, bias: Var },
    SoftmaxXent { logits: Var, label: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass is a single reverse walk.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} was never recorded on this tape", v.0)))
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(
            &self.node(input)?.value,
            &self.node(kernel)?.value,
            &self.node(bias)?.value,
            stride,
            pad,
        )?;
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, stride, pad }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(&self.node(x)?.value);
        Ok(self.push(out, Op::Relu(x)))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2_with_argmax(&self.node(x)?.value)?;
        Ok(self.push(out, Op::MaxPool2 { input: x, argmax }))
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let out = ops::gap(&self.node(x)?.value)?;
        Ok(self.push(out, Op::Gap(x)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts.iter().map(|&p| self.node(p).map(|n| &n.value)).collect::<Result<Vec<_>>>()?;
        let out = ops::concat(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn fc(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::fc(&self.node(input)?.value, &self.node(weight)?.value, &self.node(bias)?.value)?;
        Ok(self.push(out, Op::Fc { input, weight, bias }))
    }

    /// Scalar cross-entropy loss node.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = ops::softmax_xent(&self.node(logits)?.value, label)?;
        Ok(self.push(Tensor::full(&[1], loss), Op::SoftmaxXent { logits, label, probs }))
    }

    /// Reverse pass from a scalar node, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::State(format!(
                "backward from a non-scalar node of shape {:?} needs an explicit seed",
                node.value.shape()
            )));
        }
        self.backward_with(loss, Tensor::full(node.value.shape(), 1.0))
    }

    /// Reverse pass from `output` with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let out_node = self.node(output)?;
        seed.expect_shape(out_node.value.shape())?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias, stride, pad } => {
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        *stride,
                        *pad,
                        &g,
                    )?;
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *kernel, dk)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::MaxPool2 { input, argmax } => {
                    let dx = ops::maxpool2_backward(self.value(*input).shape(), argmax, &g)?;
                    accumulate(&mut grads, *input, dx)?;
                }
                Op::Gap(x) => {
                    let dx = ops::gap_backward(self.value(*x).shape(), &g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let piece = Tensor::new(vec![n], g.data()[offset..offset + n].to_vec())?;
                        accumulate(&mut grads, p, piece)?;
                        offset += n;
                    }
                }
                Op::Fc { input, weight, bias } => {
                    let (dx, dw, db) =
                        ops::fc_backward(self.value(*input), self.value(*weight), self.value(*bias), &g)?;
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *weight, dw)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::SoftmaxXent { logits, label, probs } => {
                    let upstream = g.data()[0];
                    let data = probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| upstream * (p - if i == *label { 1.0 } else { 0.0 }))
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(vec![probs.len()], data)?)?;
                }
            }
            // Keep gradients of leaves; intermediates are no longer needed.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let shapes = self.nodes[..=output.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of recorded leaves with respect to the backward root.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves the root does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => Tensor::zeros(&self.shapes[v.0]),
            None => panic!("variable {} is not upstream of the backward root", v.0),
        }
    }
}
