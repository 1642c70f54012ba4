//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record a backward closure together with
//! their parents; [`Tensor::backward`] walks the recorded graph once in reverse
//! creation order and accumulates gradients into the leaves.
//!
//! Element types are `f32` (training) and `f64` (gradient checks), selected
//! statically through the [`Element`] trait, so a dtype mismatch between
//! operands is a compile-time error rather than a runtime one.

mod elementwise;
mod kernels;
mod linalg;
mod local;
mod reduce;
mod shape;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;

pub use kernels::{gemm, Transpose};
pub use local::{neighborhood_window, window_extent};

/// Storage type tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("binary32"),
            DType::F64 => f.write_str("binary64"),
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: buffer of {len} elements does not fit shape {shape:?}")]
    BufferSize {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: invalid arguments: {reason}")]
    InvalidSpec { op: &'static str, reason: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Scalar types a tensor can hold.
pub trait Element:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` on strided row-major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    ) {
        // SAFETY: `kernels::gemm` validated every strided access against the
        // slice lengths before dispatching here.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                1,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    ) {
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                1,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

type BackwardFn<E> = Box<dyn Fn(&[E], &[E]) -> Vec<Option<Vec<E>>>>;

struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    parents: Vec<Tensor<E>>,
    // (grad_out, out_data) -> one optional gradient per parent
    backward: Option<BackwardFn<E>>,
    op: &'static str,
}

/// Dense N-dimensional array; see the module docs.
pub struct Tensor<E: Element = f32> {
    node: Rc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<E> = self.node.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &E::DTYPE)
            .field("op", &self.node.op)
            .field("data", &preview)
            .finish()
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations currently record the graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched off; results never require grad.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<E: Element>(op: &'static str, data: &[E]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<E: Element> Tensor<E> {
    /// Creates a constant tensor from a row-major buffer.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::BufferSize {
                op: "from_vec",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Creates a trainable leaf.
    pub fn parameter(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Self::leaf(t.to_vec(), shape.to_vec(), true))
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| E::from_f64(v)).collect(), shape)
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![E::from_f64(v)], vec![], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![E::zero(); numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::leaf(vec![E::from_f64(v); numel(shape)], shape.to_vec(), false)
    }

    fn leaf(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                op: "leaf",
            }),
        }
    }

    /// Builds an op result. `backward` is kept only when recording is on and
    /// some parent requires grad.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<E>,
        shape: Vec<usize>,
        parents: &[&Tensor<E>],
        backward: impl Fn(&[E], &[E]) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}");
        check_finite(op, &data)?;
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let (parents, backward): (Vec<Tensor<E>>, Option<BackwardFn<E>>) = if track {
            (
                parents.iter().map(|p| (*p).clone()).collect(),
                Some(Box::new(backward)),
            )
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad: track,
                grad: RefCell::new(None),
                parents,
                backward,
                op,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn data(&self) -> &[E] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0].as_f64()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.node.op
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.shape().to_vec(), false)
    }

    /// Same values as a fresh trainable leaf.
    pub fn as_parameter(&self) -> Self {
        Self::leaf(self.to_vec(), self.shape().to_vec(), true)
    }

    /// Converts between element types (constant result).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::<F>::leaf(
            self.node.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
            self.shape().to_vec(),
            self.requires_grad() && self.is_leaf(),
        )
    }

    /// Reverse-mode sweep from a single-element loss.
    ///
    /// Node ids increase with creation, so visiting reachable nodes in
    /// descending id order is a reverse topological order and touches each
    /// node exactly once. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut nodes: HashMap<u64, Tensor<E>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                if p.requires_grad() && !nodes.contains_key(&p.node.id) {
                    stack.push(p.clone());
                }
            }
            nodes.insert(t.node.id, t);
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.node.id, vec![E::one()]);
        for id in order {
            let t = &nodes[&id];
            let Some(g) = grads.remove(&id) else { continue };
            match &t.node.backward {
                Some(bw) => {
                    let parent_grads = bw(&g, &t.node.data);
                    debug_assert_eq!(parent_grads.len(), t.node.parents.len(), "{}", t.node.op);
                    for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad size from {}", t.node.op);
                        match grads.get_mut(&p.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.node.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.square().unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_of_plain_sum_is_ones() {
        let x = Tensor::<f32>::parameter(vec![3.0, -1.0, 0.5], &[3]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.square().unwrap().sum().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.square().unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn shared_subexpression_visits_once() {
        // loss = sum(y * y) with y = 3x; dL/dx = 18x
        let x = Tensor::<f64>::parameter(vec![1.0, -2.0], &[2]).unwrap();
        let y = x.scale(3.0).unwrap();
        let loss = y.mul(&y).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![18.0, -36.0]);
    }

    #[test]
    fn recording_toggle_does_not_change_values() {
        let x = Tensor::<f32>::parameter(vec![0.3, -1.2, 2.0, 0.1], &[2, 2]).unwrap();
        let f = |x: &Tensor<f32>| x.matmul(x).unwrap().gelu().unwrap().softmax(1).unwrap();
        let on = f(&x);
        let off = no_grad(|| f(&x));
        assert!(on.requires_grad());
        assert!(!off.requires_grad());
        assert_eq!(on.data(), off.data());
    }

    #[test]
    fn non_finite_inputs_are_errors() {
        assert!(matches!(
            Tensor::<f32>::from_vec(vec![f32::NAN], &[1]),
            Err(TensorError::NonFinite { .. })
        ));
        let x = Tensor::<f32>::from_vec(vec![0.0], &[1]).unwrap();
        assert!(matches!(x.rsqrt(), Err(TensorError::NonFinite { .. })));
    }
}
