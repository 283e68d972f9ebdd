use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule: receives the upstream gradient and a per-parent flag saying
/// whether that parent needs a gradient, returns one entry per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order; `backward` walks it in reverse exactly once.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, usize)>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), true)
    }

    /// A named parameter leaf. Its gradient can be fetched by name afterwards.
    pub fn param(&self, name: &str, value: Arc<Tensor<T>>, trainable: bool) -> Var<'_, T> {
        let v = self.leaf(value, trainable);
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    pub(crate) fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record an operation. The backward rule is dropped when no parent needs
    /// a gradient.
    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record a user-supplied operation with an explicit backward rule.
    ///
    /// `backward` receives the upstream gradient and must return one gradient
    /// per input, each shaped like that input.
    pub fn custom<'t, F>(&'t self, inputs: &[Var<'t, T>], value: Tensor<T>, backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Tensor<T>> + 'static,
    {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.push(
            value,
            &ids,
            Box::new(move |g, _| backward(g).into_iter().map(Some).collect()),
        )
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every leaf created with `requires_grad` that the loss depends on gets a
    /// gradient; named parameters that the loss does not reach get zeros. A
    /// tape can be swept once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let loss_shape = loss.shape();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_shape));
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(rule) = node.backward.take() else {
                leaves.insert(id, g);
                continue;
            };
            let parents = node.parents.clone();
            let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = rule(&g, &needs);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for ((&p, pg), need) in parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut params = HashMap::new();
        for (name, id) in self.params.borrow().iter() {
            let g = leaves
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(nodes[*id].value.shape().to_vec()));
            params.insert(name.clone(), g);
        }
        Ok(Gradients { leaves, params })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf variable, `None` if it was unreachable
    /// or does not require gradients.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &HashMap<String, Tensor<T>> {
        &self.params
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}
