//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus an optional gradient
//! slot; a [`Tape`] records every differentiable operation in execution
//! order and [`backward`] replays it in exact reverse order, accumulating
//! gradients additively into every `requires_grad` leaf it reaches.
//!
//! Precision is generic: training uses `f32`, gradient checks use `f64`
//! (finite differences are unreliable in single precision).

mod element;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod store;

pub use element::{Dtype, Element};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

struct Inner<E: Element> {
    shape: Vec<usize>,
    data: Box<[E]>,
    grad: RefCell<Option<Box<[E]>>>,
    requires_grad: bool,
}

/// Dense row-major tensor. Cloning is cheap (shared buffer); the data is
/// immutable after construction, only the gradient slot is interior-mutable.
pub struct Tensor<E: Element>(Rc<Inner<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}(req_grad={})", self.shape(), self.requires_grad())
    }
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            op,
            format!("degenerate shape {shape:?}: every dimension must be positive"),
        ));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} implies {numel} elements, buffer holds {len}"),
        ));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    fn new(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            shape,
            data: data.into_boxed_slice(),
            grad: RefCell::new(None),
            requires_grad,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        check_shape("tensor", shape, data.len())?;
        Ok(Self::new(shape.to_vec(), data, false))
    }

    /// Leaf tensor that participates in differentiation.
    pub fn leaf(shape: &[usize], data: Vec<E>) -> Result<Self> {
        check_shape("tensor", shape, data.len())?;
        Ok(Self::new(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![E::zero(); numel])
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: E) -> Self {
        Self::new(vec![1], vec![value], false)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::new(shape, data, requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Current gradient, if any has been accumulated.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().as_ref().map(|g| g.to_vec())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Adds `g` into the gradient slot (gradients from multiple consumers
    /// accumulate additively).
    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_deref_mut() {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d = *d + *s;
                }
            }
            None => *slot = Some(g.to_vec().into_boxed_slice()),
        }
    }

    pub(crate) fn grad_clone(&self) -> Option<Vec<E>> {
        self.grad()
    }

    /// A constant copy that shares no autodiff history.
    pub fn detached(&self) -> Tensor<E> {
        Self::new(self.0.shape.clone(), self.0.data.to_vec(), false)
    }

    /// Same data reinterpreted with a new shape of equal element count.
    /// Not an autodiff op; use [`ops::reshape`] inside a taped computation.
    pub fn reshaped_view(&self, shape: &[usize]) -> Result<Tensor<E>> {
        check_shape("reshape", shape, self.numel())?;
        Ok(Tensor(Rc::new(Inner {
            shape: shape.to_vec(),
            data: self.0.data.clone(),
            grad: RefCell::new(None),
            requires_grad: false,
        })))
    }
}

type BackwardFn = Box<dyn Fn()>;

/// Records differentiable operations in execution order.
///
/// One tape is confined to one execution context; [`backward`] drains the
/// recorded operations, so a tape drives at most one backward pass.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<BackwardFn>>,
    active: bool,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            active: true,
            _marker: std::marker::PhantomData,
        }
    }

    /// A tape that records nothing; use for inference/evaluation passes.
    pub fn inactive() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            active: false,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn recording(&self) -> bool {
        self.active
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub(crate) fn push(&self, backward: BackwardFn) {
        if self.active {
            self.nodes.borrow_mut().push(backward);
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Reverse pass: seeds `loss` with 1 and replays the tape in exact reverse
/// execution order. Every upstream `requires_grad` tensor ends up holding
/// dLoss/dTensor; fan-out contributions are summed.
///
/// Consumes the recorded operations: a second call on the same tape is a
/// no-op over an empty record.
pub fn backward<E: Element>(tape: &Tape<E>, loss: &Tensor<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::contract(
            "backward",
            format!("loss must be scalar, got shape {:?}", loss.shape()),
        ));
    }
    loss.accumulate_grad(&[E::one()]);
    let nodes = std::mem::take(&mut *tape.nodes.borrow_mut());
    for node in nodes.iter().rev() {
        node();
    }
    Ok(())
}
