//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Tensor`] is a reference-counted node. Operations on tensors that
//! require gradients record their inputs, forming an acyclic graph that
//! [`Tensor::backward`] walks in reverse topological order. Leaves keep
//! their accumulated gradient; intermediate gradients are released as soon
//! as they have been propagated.

pub mod branch;
mod conv;
pub mod gradcheck;
mod ops;
mod pool;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;

pub use conv::{conv2d, set_conv_backward_fault};
pub use ops::{
    add, affine, clamp, concat_channels, dropout, log, reduce_max_spatial, reduce_sum, relu,
    scalar_mul, sigmoid, softmax_cross_entropy_2class, sum_squares,
};
pub use pool::{avgpool2d, maxpool2d, upsample_bilinear};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording backward edges on this thread, so
/// intermediate values are freed as soon as they go out of scope.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

pub(crate) enum Op<T: Real> {
    Conv2d { x: Tensor<T>, w: Tensor<T>, b: Option<Tensor<T>>, stride: usize, pad: usize },
    MaxPool { x: Tensor<T>, argmax: Vec<usize> },
    AvgPool { x: Tensor<T>, stride: usize },
    Upsample { x: Tensor<T>, factor: usize },
    Concat { a: Tensor<T>, b: Tensor<T> },
    Add { a: Tensor<T>, b: Tensor<T> },
    Relu { x: Tensor<T> },
    Sigmoid { x: Tensor<T> },
    Log { x: Tensor<T> },
    Scale { x: Tensor<T>, c: T },
    Affine { x: Tensor<T>, scale: Vec<T> },
    Clamp { x: Tensor<T>, lo: T, hi: T },
    Sum { x: Tensor<T> },
    MaxSpatial { x: Tensor<T>, argmax: Vec<usize> },
    Dropout { x: Tensor<T>, mask: Vec<T> },
    SumSquares { x: Tensor<T> },
    SoftmaxXent2 { logits: Tensor<T>, target: Rc<[u8]> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Log { .. } => "log",
            Op::Scale { .. } => "scalar_mul",
            Op::Affine { .. } => "affine",
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "reduce_sum",
            Op::MaxSpatial { .. } => "reduce_max_spatial",
            Op::Dropout { .. } => "dropout",
            Op::SumSquares { .. } => "sum_squares",
            Op::SoftmaxXent2 { .. } => "softmax_cross_entropy_2class",
        }
    }

    fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::Concat { a, b } | Op::Add { a, b } => vec![a, b],
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Log { x }
            | Op::Scale { x, .. }
            | Op::Affine { x, .. }
            | Op::Clamp { x, .. }
            | Op::Sum { x }
            | Op::MaxSpatial { x, .. }
            | Op::Dropout { x, .. }
            | Op::SumSquares { x } => vec![x],
            Op::SoftmaxXent2 { logits, .. } => vec![logits],
        }
    }
}

pub(crate) struct Node<T: Real> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

/// Dense row-major tensor with an optional gradient buffer and backward record.
pub struct Tensor<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.as_ref().map(Op::name))
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            op,
            requires_grad,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor whose gradient is accumulated by [`Tensor::backward`].
    pub fn leaf(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![v; n], false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    /// Result of an operation. The backward record is kept only when some
    /// input requires a gradient, so inference graphs free eagerly.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { Some(op) } else { None };
        Self::build(shape, data, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(Op::name)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meaningful for leaves (parameters);
    /// mutating an interior node does not update its consumers.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Interprets the shape as `(N, C, H, W)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.0.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape(op, format!("expected a 4-D tensor, got {other:?}"))),
        }
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn accumulate_grad_owned(&self, g: Vec<T>) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(g),
        }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        // (tensor, children pushed?)
        let mut stack = vec![(self.clone(), false)];
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
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Accumulates `d self / d leaf` into every reachable leaf that requires
    /// a gradient. `self` must hold a single element.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.0.shape),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            let Some(op) = &node.0.op else { continue };
            let Some(g) = node.0.grad.borrow_mut().take() else { continue };
            ops::backward(op, node, &g);
        }
        Ok(())
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} holds {n} elements but {len} values were given"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let x = Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = Tensor::leaf(&[4], vec![0.3, 0.1, -0.7, 2.0]).unwrap();
        let loss = reduce_sum(&add(&w, &w).unwrap());
        // d/dw sum(2w) = 2
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0; 4]);

        let w2 = Tensor::leaf(&[4], vec![0.3, 0.1, -0.7, 2.0]).unwrap();
        let loss = reduce_sum(&affine(&w2, x.to_vec(), vec![0.0; 4]).unwrap());
        loss.backward().unwrap();
        assert_eq!(w2.grad().unwrap(), x.to_vec());
    }

    #[test]
    fn second_backward_doubles_gradients() {
        let w = Tensor::leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = sum_squares(&w);
        loss.backward().unwrap();
        let once = w.grad().unwrap();
        loss.backward().unwrap();
        let twice = w.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        let x = Tensor::leaf(&[1], vec![3.0f64]).unwrap();
        let a = scalar_mul(&x, 2.0);
        let b = scalar_mul(&x, 5.0);
        let y = add(&a, &b).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn constants_do_not_record() {
        let x = Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap();
        let y = relu(&x);
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
    }

    #[test]
    fn no_grad_skips_recording() {
        let w = Tensor::leaf(&[2], vec![1.0f64, -1.0]).unwrap();
        let y = no_grad(|| relu(&w));
        assert!(!y.requires_grad());
        assert!(relu(&w).requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::leaf(&[2], vec![1.0f64, 2.0]).unwrap();
        assert!(relu(&x).backward().is_err());
    }
}
