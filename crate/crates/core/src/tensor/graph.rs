use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order of the
/// dataflow DAG; `backward` walks it once in reverse. A graph is built per
/// forward pass and dropped afterwards.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf whose gradient is populated by [`Graph::backward`].
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
                index,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Populates the gradient of every node that depends on a trainable leaf.
    /// Calling it again recomputes from scratch; results are bit-identical.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {numel} elements"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            self.nodes[i].op.backward(&self.nodes, i, &g, &mut sink)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Accumulator handed to each op's backward rule.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    /// Mutable gradient buffer of `v`, or `None` when `v` is not tracked.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub fn add(&mut self, v: Var, delta: &[f64]) {
        if let Some(g) = self.slot(v) {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }
}
