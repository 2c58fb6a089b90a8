//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes whose
//! inputs do not require gradients carry no backward closure, so frozen
//! subnetworks cost only their forward pass plus whatever input gradient
//! is actually requested.

mod conv;
mod elementwise;
mod entropy;
mod layout;
mod loss;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::Conv2dSpec;
pub use elementwise::quantize8 as quantize8_value;
pub use entropy::logistic_bin_mass;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded in a [`Graph`].
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: Vec::new(), backward: None, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an op. `make_backward` is only invoked when some parent
    /// requires a gradient; it receives the per-parent requirement flags.
    pub(crate) fn push_op<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], make_backward: F) -> Var<'_, T>
    where
        F: FnOnce(&[bool]) -> BackwardFn<T>,
    {
        let flags: Vec<bool> = {
            let nodes = self.nodes.borrow();
            parents.iter().map(|p| nodes[p.id].requires_grad).collect()
        };
        let requires_grad = flags.iter().any(|&f| f);
        let backward = if requires_grad { Some(make_backward(&flags)) } else { None };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
        });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Differentiates a single-element output with respect to every leaf
    /// created with [`Graph::param`].
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.numel(), 1, "backward() needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.id).map(|_| None).collect();
        let shape = nodes[output.id].value.shape().to_vec();
        grads[output.id] = Some(Tensor::ones(&shape));
        let mut leaves = HashMap::new();

        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaves.insert(id, grad);
                }
                Some(backward) => {
                    let parent_grads = backward(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[pid].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                        match &mut grads[pid] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { by_id: leaves }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut out of the gradient path.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, or `None` if it did not influence the output.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id.get(&var.id)
    }

    /// Gradient for `var`, zeros if it did not influence the output.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 3.0]));
        // y = sum(x*x + x) -> dy/dx = 2x + 1
        let y = x.mul(x).add(x).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = x.mul(c).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = x.mul(x.detach()).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }
}
