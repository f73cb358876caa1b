//! Reverse-mode differentiation over a tape of tensor-valued nodes.
//!
//! Every op pushes its output value together with a [`Backward`] rule. A
//! backward pass walks the tape in reverse, hands each rule the gradient of
//! its output and accumulates what it returns into the rule's inputs.
//! Parameters that never reach the loss get an explicit zero gradient.

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded op.
pub trait Backward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> &[Var];

    /// Gradients with respect to each input, in [`inputs`](Self::inputs)
    /// order. `None` means "no contribution"; rules may skip inputs for which
    /// [`Ctx::needs`] is false.
    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;
}

/// View of the tape handed to a backward rule.
pub struct Ctx<'a, T: Real> {
    graph: &'a Graph<T>,
    output: Var,
    needs: Vec<bool>,
}

impl<T: Real> Ctx<'_, T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub fn output(&self) -> &Tensor<T> {
        self.graph.value(self.output)
    }

    /// Whether input `i` needs a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// A single forward/backward tape. Not shared across threads; independent
/// passes use independent graphs.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: negate every gradient produced by ops named `op`.
    pub fn inject_fault(&mut self, op: impl Into<String>) {
        self.fault = Some(op.into());
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an op's output. Fails if the value is not finite.
    pub fn push(&mut self, value: Tensor<T>, op: Box<dyn Backward<T>>) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradients of the scalar `loss` with respect to the leaves.
    /// Intermediate gradients are released as soon as they are consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_impl(loss, false)
    }

    /// Like [`backward`](Self::backward) but keeps the gradient of every
    /// intermediate node.
    pub fn backward_retaining(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&self, loss: Var, retain: bool) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = op
                .inputs()
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let ctx = Ctx {
                graph: self,
                output: Var(idx),
                needs,
            };
            let mut input_grads = op.backward(&ctx, &g)?;
            if self.fault.as_deref() == Some(op.name()) {
                for ig in input_grads.iter_mut().flatten() {
                    *ig = ig.scale(-T::one());
                }
            }
            for (v, ig) in op.inputs().iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if !ig.same_shape(&self.nodes[v.0].value) {
                    return Err(Error::shape(
                        op.name(),
                        format!(
                            "gradient shape {:?} for input of shape {:?}",
                            ig.shape(),
                            self.nodes[v.0].value.shape()
                        ),
                    ));
                }
                ig.ensure_finite(op.name())?;
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot => *slot = Some(ig),
                }
            }
            if retain {
                grads[idx] = Some(g);
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
