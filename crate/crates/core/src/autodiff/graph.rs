use super::ops::Op;
use super::{Array, AutodiffError, ParamId, ParamStore, Scalar};

/// Handle to an array recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(super) struct Node<T> {
    pub(super) value: Array<T>,
    pub(super) requires_grad: bool,
    pub(super) op: Op<T>,
}

/// Append-only tape of arrays and the operations that produced them.
///
/// Nodes are only ever appended and every operation refers to earlier nodes,
/// so the tape order is a topological order of the graph.
pub struct Graph<'p, T: Scalar> {
    pub(super) nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
    pub(super) validate: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
            validate: false,
        }
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that can bind parameters from `params` on demand.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            bound: vec![None; params.len()],
            validate: false,
        }
    }

    /// Reject non-finite kernel inputs when enabled.
    pub fn validating(mut self, on: bool) -> Self {
        self.validate = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True when `v` was produced by an operation (not a leaf).
    pub fn has_backward_record(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf | Op::Param)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives gradient.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id.0).copied().flatten() {
            return v;
        }
        let store = self
            .params
            .expect("graph was created without a parameter store");
        let value = store.get(id).clone();
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters read by this graph so far, in binding order of their ids.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    /// Identity on values with no backward record: gradient never reaches `x`
    /// through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub(super) fn push(&mut self, value: Array<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        // Ops without any differentiable parent are recorded as leaves.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn check_finite(
        &self,
        kernel: &'static str,
        inputs: &[Var],
    ) -> Result<(), AutodiffError> {
        if self.validate && inputs.iter().any(|v| !self.nodes[v.0].value.is_finite()) {
            return Err(AutodiffError::NonFinite { kernel });
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate over
    /// every path through which a node reaches the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            node.op.backward(self, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for parameter `id`; `None` when the parameter was not bound
    /// or not reached from the loss.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.bound
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }

    /// Per-parameter gradients indexed by [`ParamId`].
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Vec<T>>> {
        (0..n_params)
            .map(|i| {
                self.bound
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grads[v.0].take())
            })
            .collect()
    }
}
