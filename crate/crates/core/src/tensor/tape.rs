use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<E: Element> {
    pub shape: Vec<usize>,
    pub value: Vec<E>,
    pub op: super::ops::Op<E>,
    pub requires_grad: bool,
    /// Persistent accumulator; only leaves ever receive one.
    pub grad: Option<Vec<E>>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node's inputs have smaller
/// indices than the node itself and the record is always topologically sorted.
pub struct Tape<E: Element> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding a copy of `t`; it collects gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "input",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(self.push_leaf(shape.to_vec(), data, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<Var> {
        self.input(shape, data, false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: super::ops::Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<E>,
        op: super::ops::Op<E>,
        inputs: &[Var],
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { super::ops::Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar(&self, v: Var) -> Result<E> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::shape("scalar", format!("shape {:?} is not scalar", node.shape)));
        }
        Ok(node.value[0])
    }

    pub fn tensor(&self, v: Var) -> Tensor<E> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// Reverse pass from `root`, seeded with ones.
    ///
    /// Intermediate gradients live only for the duration of the call; leaf
    /// accumulators are added into, so repeated calls sum.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("unknown node {}", root.0)));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![E::one(); self.nodes[root.0].value.len()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, super::ops::Op::Leaf) {
                leaf_grads.push((i, g));
            } else {
                super::ops::propagate(&self.nodes, i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            let acc = self.nodes[i]
                .grad
                .get_or_insert_with(|| vec![E::zero(); g.len()]);
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        Ok(())
    }
}
