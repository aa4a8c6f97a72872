use super::tensor::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of a recorded operation.
///
/// `inputs` are the forward values of the op's inputs in the order they were
/// recorded. The returned vector has one slot per input; slots for inputs with
/// `needs[i] == false` may be `None`.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Tape of tensor operations recorded during a forward pass.
///
/// A graph is single-threaded; build one per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
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
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a differentiable input tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records the named parameter as a differentiable leaf.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let mut value = params.get(name)?.clone();
        value.grad = None;
        let var = self.push_leaf(value, true);
        self.params.push((name.to_string(), var));
        Ok(var)
    }

    /// Makes later [`param`](Self::param) lookups of `name` resolve to `var`
    /// instead of reading the parameter set.
    pub fn bind_param(&mut self, name: &str, var: Var) -> Result<()> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::shape(
                "bind_param",
                format!("`{name}` is already bound"),
            ));
        }
        self.params.push((name.to_string(), var));
        Ok(())
    }

    fn push_leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an operation. Fails if the result is not finite.
    pub fn push_op(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        op: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op: Some(op),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn check_finite_input(&self, var: Var, op: &'static str) -> Result<()> {
        if self.nodes[var.0].value.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.nodes.get(loss.0).ok_or(Error::BackwardBeforeForward)?;
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::DisconnectedGraph);
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad_out, &needs);
            for ((var, need), g) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }
}

/// Gradients of a scalar loss w.r.t. every differentiable leaf of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var)>,
    shapes: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf. Leaves unreachable from the loss get zeros.
    pub fn get(&self, var: Var) -> Vec<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.shapes[var.0]],
        }
    }

    /// Stores parameter gradients into the set's grad slots, accumulating
    /// onto any gradient already present.
    pub fn write_to(&self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, var) in &self.params {
            let g = self.get(*var);
            let t = params.get_mut(name)?;
            match &mut t.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a = *a + *b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
