//! Minimal reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Tensor`] is a reference-counted node. Operations on tensors that
//! require gradients record their inputs and a local gradient rule; node ids
//! increase monotonically with creation, so sorting reachable nodes by id
//! gives the recording order and [`Tensor::backward`] walks it in reverse.
//!
//! Values are stored as `f64`. In the default [`Precision::F32`] mode every
//! op output, accumulated gradient and optimizer update is rounded to the
//! nearest `f32`, which reproduces single-precision training. Gradient checks
//! switch the thread into [`Precision::F64`] with [`precision_scope`].

mod gradcheck;
mod loss;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{loss, softmax_values, LossKind, LossTarget};
pub(crate) use ops::Op;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

/// Restores the previous precision mode when dropped.
pub struct PrecisionGuard(Precision);

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        PRECISION.with(|p| p.set(self.0));
    }
}

pub fn precision_scope(mode: Precision) -> PrecisionGuard {
    let prev = PRECISION.with(|p| p.replace(mode));
    PrecisionGuard(prev)
}

/// Disables tape recording on this thread until dropped.
pub struct NoGradGuard(bool);

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard(prev)
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

/// Rounds a buffer in place to the active precision.
pub(crate) fn round_buf(buf: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in buf.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

pub(crate) fn round_val(v: f64) -> f64 {
    match precision() {
        Precision::F32 => v as f32 as f64,
        Precision::F64 => v,
    }
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op,
        }))
    }

    /// Builds a constant tensor. Fails when `product(shape) != data.len()`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        let mut data = data;
        round_buf(&mut data);
        Ok(Tensor::from_parts(data, shape.to_vec(), false, None))
    }

    /// Builds a trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(vec![round_val(value); n], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![round_val(value)], vec![1], false, None)
    }

    /// Output of a recorded op. The op is kept only if recording is enabled
    /// and some parent participates in differentiation.
    pub(crate) fn from_op(mut data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        round_buf(&mut data);
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Tensor::from_parts(data, shape, true, Some(op))
        } else {
            Tensor::from_parts(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values of a leaf. Mutating a tensor that already
    /// feeds a recorded graph invalidates that graph's gradients.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Replaces the values, keeping the shape.
    pub fn set_data(&self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape("set_data", &self.0.shape, &[values.len()]));
        }
        let mut values = values;
        round_buf(&mut values);
        *self.0.data.borrow_mut() = values;
        Ok(())
    }

    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Marks a leaf trainable or frozen. Has no effect on recorded op outputs.
    pub fn set_requires_grad(&self, flag: bool) {
        if self.0.op.is_none() {
            self.0.requires_grad.set(flag);
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient, or zeros when nothing reached this tensor.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy that shares nothing with the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.to_vec(), self.0.shape.clone(), false, None)
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate_grad(&self, mut g: Vec<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
                round_buf(acc);
            }
            None => {
                round_buf(&mut g);
                *slot = Some(g);
            }
        }
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into every
    /// reachable tensor that requires them; call [`Tensor::zero_grad`] between
    /// independent passes.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage("backward root is not on the tape".into()));
        }

        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: std::collections::HashMap<u64, Vec<f64>> = std::collections::HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in &order {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                let out = node.0.data.borrow();
                for (parent, pg) in op.backward(&g, &out, node.shape()) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&pg) {
                                *a += v;
                            }
                        }
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            node.accumulate_grad(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
