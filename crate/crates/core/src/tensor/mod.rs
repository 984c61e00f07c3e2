//! Dense `f64` tensors with a dynamic reverse-mode tape.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record a tape node holding the op and its
//! inputs; [`Tensor::backward`] walks those nodes in reverse topological order
//! and accumulates gradients into every reachable tensor that requires them.
//! Parameters are updated by replacing the tensor, not by writing into it, so
//! a graph built before an optimizer step keeps seeing the old values.

mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) use ops::Op;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording tape nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct TapeNode {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<TapeNode>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "zero-sized dimension in shape {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidArgument(format!(
            "shape {shape:?} needs {numel} elements, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            node: None,
        }))
    }

    /// Constant (non-trainable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf tensor.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(vec![value], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Self::new(vec![0.0; n], shape)
    }

    pub fn eye(n: usize) -> Result<Tensor> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(data, &[n, n])
    }

    /// I.i.d. normal entries with standard deviation `scale`.
    pub fn randn(shape: &[usize], rng: &mut Rng, scale: f64) -> Result<Tensor> {
        if shape.is_empty() {
            return Err(Error::InvalidArgument("randn: empty shape".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "randn: scale must be positive, got {scale}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "randn: zero-sized dimension in {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * scale).collect();
        Self::new(data, shape)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: Vec<Tensor>) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then_some(TapeNode { op, inputs });
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor was produced by a recorded operation.
    pub fn has_tape_node(&self) -> bool {
        self.0.node.is_some()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Fresh leaf with the same values and no history.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Fresh leaf with the same values and the given trainability.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), requires_grad)
    }

    /// Same storage identity (used to check parameter sharing).
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate_grad(&self, delta: Vec<f64>) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
            None => *slot = Some(delta),
        }
    }

    /// Back-propagates from a scalar and accumulates into every reachable
    /// tensor that requires gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(vec![1.0]);
        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let grad_out = match t.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let grads = node.op.backward(t, &node.inputs, &grad_out);
            for (input, g) in node.inputs.iter().zip(grads) {
                if let Some(g) = g {
                    input.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !visited.contains(&Rc::as_ptr(&input.0)) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
