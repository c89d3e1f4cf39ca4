//! Dense f64 tensors with a dynamically recorded reverse-mode autodiff graph.
//!
//! Every op that receives at least one input with `requires_grad` records its
//! inputs; [`Tensor::backward`] walks that graph in reverse topological order.
//! Inputs without gradients produce plain constants and no graph.

mod gradcheck;
mod kernels;
mod ops;
mod rng;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use sha2::{Digest, Sha256};

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::gemm_nn as gemm;
pub use ops::NORM_EPS;
pub use rng::SeededRng;

use crate::error::{Error, Result};
use ops::Op;

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Shared handle to a node of the autodiff graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &*self.0.data.borrow())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    fn checked(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) || numel(&shape) != data.len() {
            return Err(Error::Dimension {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(data, shape, requires_grad, None))
    }

    /// Constant tensor; never receives a gradient.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::checked(data, shape.to_vec(), false)
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::checked(data, shape.to_vec(), true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::build(data, vec![n, n], false, None)
    }

    /// Result of an op. Parents are retained only when a gradient can flow.
    fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Self::build(data, shape, requires_grad, requires_grad.then_some(op))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// In-place access for optimizers. The shape is fixed.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values with no graph attached.
    pub fn detach(&self) -> Tensor {
        Self::build(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// Identity of the underlying node, stable while any handle is alive.
    fn key(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a single-element loss.
    ///
    /// Gradients accumulate into every reachable tensor with `requires_grad`;
    /// call [`Tensor::zero_grad`] between steps to reset them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Inner, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                let out = node.0.data.borrow();
                op.backward(&node.0.shape, &out, &g, &mut |parent: &Tensor, pg: Vec<f64>| {
                    if !parent.requires_grad() {
                        return;
                    }
                    match pending.get_mut(&parent.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.key(), pg);
                        }
                    }
                });
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner> = HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// SHA-256 over shapes and IEEE bit patterns, hex encoded.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        for &s in t.shape() {
            hasher.update((s as u64).to_le_bytes());
        }
        hasher.update(b";");
        for v in t.data().iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
