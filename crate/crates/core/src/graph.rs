//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value and, when any input
//! requires a gradient, a closure mapping the output gradient to input
//! gradients. [`Graph::backward`] walks the nodes in exact reverse order of
//! execution and accumulates additively at fan-out.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per input. The mask says
/// which inputs need one.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<(u64, ParamId), Var>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, op: &'static str, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, inputs: Vec::new(), requires_grad, backward: None });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push_leaf("input", value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf("constant", value, false)
    }

    /// Binds a stored parameter. Frozen parameters become constants, so no
    /// gradient can reach them. Repeated binds return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.borrow().get(&key) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_leaf("param", p.value.clone(), p.trainable);
        self.params.borrow_mut().insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an op. The output is rejected if it holds NaN or infinity.
    pub fn push_op(
        &self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Backpropagates from a single-element output. Gradients are retained
    /// for leaf nodes only.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[output.0];
        if root.value.numel() != 1 {
            return Err(Error::shape("backward", format!("output must be scalar, got {:?}", root.value.dims())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![T::one()]);
        let mut leaf_grads = HashMap::new();
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.inputs.is_empty() {
                if node.requires_grad {
                    leaf_grads.insert(i, Tensor::from_parts(node.value.shape().clone(), g));
                }
                continue;
            }
            let Some(backward) = node.backward.as_ref() else { continue };
            let mask: Vec<bool> = node.inputs.iter().map(|&j| nodes[j].requires_grad).collect();
            let g = Tensor::from_parts(node.value.shape().clone(), g);
            let input_grads = backward(&g, &mask);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for ((&j, gi), &needed) in node.inputs.iter().zip(input_grads).zip(&mask) {
                let Some(gi) = gi else { continue };
                if !needed {
                    continue;
                }
                if gi.numel() != nodes[j].value.numel() {
                    return Err(Error::shape(node.op, "backward produced a gradient of the wrong size"));
                }
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi.into_vec()),
                }
            }
        }
        Ok(Gradients { leaf: leaf_grads, params: self.params.borrow().clone() })
    }
}

pub struct Gradients<T: Real> {
    leaf: HashMap<usize, Tensor<T>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when it did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf.get(&v.0)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&(store.uid(), id)).and_then(|v| self.leaf.get(&v.0))
    }

    /// Adds every gradient of this store's parameters into its accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut ids: Vec<ParamId> = self.params.keys().filter(|(u, _)| *u == store.uid()).map(|&(_, id)| id).collect();
        ids.sort();
        for id in ids {
            if let Some(g) = self.param(store, id) {
                let g = g.clone();
                store.add_grad(id, &g)?;
            }
        }
        Ok(())
    }
}
