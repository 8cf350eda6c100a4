//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Every op that has at
//! least one input with `requires_grad` records a graph node holding its
//! parents and a backward rule; [`Tensor::backward`] walks that graph once in
//! reverse topological order and accumulates gradients additively into every
//! ancestor that requires them.
//!
//! The element type is generic over [`Scalar`] so that training runs in `f32`
//! while gradient checks can use `f64`.

mod gradcheck;
pub(crate) mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_grad, max_rel_error};

/// Floating point element type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Sum + fmt::Debug + fmt::Display + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Kind tag of a recorded op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    MulScalar,
    Tanh,
    Gelu,
    Abs,
    MatMul,
    BatchMatMul,
    Softmax,
    LayerNorm,
    CrossEntropy,
    Reshape,
    Permute,
    Concat,
    Narrow,
    Sum,
    Mean,
    AvgPool,
    UpsampleNearest,
    UpsampleBilinear,
    Unfold3x3,
    PixelShuffle,
    SpaceToDepth,
    GatherRows,
    ReplaceRows,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>>>;

/// A recorded operation: parents plus the rule mapping the output gradient to
/// one optional gradient per parent.
pub(crate) struct OpNode<T: Scalar> {
    kind: OpKind,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<OpNode<T>>,
}

pub struct Tensor<T: Scalar = f32>(Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if self.0.data.len() <= 16 {
            d.field("data", &self.0.data);
        }
        if let Some(op) = &self.0.op {
            d.field("op", &op.kind);
        }
        d.field("requires_grad", &self.0.requires_grad).finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until the guard is dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false)
    }

    /// A trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.requiring_grad())
    }

    /// Same data as a fresh leaf with `requires_grad` set.
    pub fn requiring_grad(&self) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), true)
    }

    /// Same data as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op: None,
        }))
    }

    /// Builds an op output. The graph node is only kept when recording is
    /// enabled and some parent needs a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        kind: OpKind,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let op = requires_grad.then(|| OpNode {
            kind,
            parents,
            backward,
        });
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.f64()).collect()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_kind(&self) -> Option<OpKind> {
        self.0.op.as_ref().map(|op| op.kind)
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::of(v.f64())).collect();
        Tensor::leaf(data, self.0.shape.clone(), self.0.requires_grad && self.0.op.is_none())
    }

    fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self) -> Result<()> {
        if !self.0.shape.is_empty() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor that does not require grad".into(),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(vec![T::one()]);
        for node in order.iter().rev() {
            let Some(op) = &node.0.op else { continue };
            let grad = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let parent_grads = (op.backward)(&grad, &op.parents);
            debug_assert_eq!(parent_grads.len(), op.parents.len());
            for (parent, g) in op.parents.iter().zip(parent_grads) {
                if let (true, Some(g)) = (parent.requires_grad(), g) {
                    debug_assert_eq!(g.len(), parent.numel(), "{:?}", op.kind);
                    parent.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    /// Post-order over the recorded graph; each node appears once.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
