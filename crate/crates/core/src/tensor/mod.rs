//! Reverse-mode automatic differentiation over dense row-major f64 matrices.
//!
//! The engine is a classic Wengert list: forward ops append nodes to a
//! [`Tape`], and [`Tape::backward`] walks the list once in reverse,
//! accumulating gradients into every tensor that requires them. Tensors are
//! cheap handles (`Rc<RefCell<..>>`), so the same leaf used twice in a graph
//! receives the sum of both contributions.
//!
//! Invariants enforced throughout:
//! - every op output is checked for NaN/Inf and rejected with an error;
//! - nodes are recorded only while the tape is enabled and only when an
//!   input requires a gradient;
//! - a tape is single-use: one backward pass consumes it.

mod check;
mod ops;
mod prng;

pub use check::{finite_diff_check, random_param, FiniteDiffReport};
pub use prng::Prng;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

pub(crate) use ops::Node;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct Inner {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    /// Index of the node that produced this tensor, if any.
    node_id: Option<usize>,
}

/// Shared handle to a matrix. Cloning shares storage and gradient; use
/// [`Tensor::deep_clone`] for an independent copy.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("rows", &inner.rows)
            .field("cols", &inner.cols)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor(Rc::new(RefCell::new(Inner {
            rows,
            cols,
            data,
            grad: None,
            requires_grad,
            node_id: None,
        })))
    }

    /// Builds a tensor from row-major data. Rejects length mismatches and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor::new(rows, cols, data, false))
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, vec![0.0; rows * cols], false)
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::from_vec(1, 1, vec![value])
    }

    /// Gaussian init with mean 0 and the given standard deviation.
    pub fn gaussian(rows: usize, cols: usize, std_dev: f64, prng: &mut Prng) -> Tensor {
        let data = (0..rows * cols).map(|_| prng.normal(0.0, std_dev)).collect();
        Tensor::new(rows, cols, data, false)
    }

    /// Marks this tensor as a trainable leaf (or unmarks it).
    pub fn set_requires_grad(&self, value: bool) {
        self.0.borrow_mut().requires_grad = value;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.0.borrow().cols
    }

    pub fn len(&self) -> usize {
        let inner = self.0.borrow();
        inner.rows * inner.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.0.borrow().node_id
    }

    pub(crate) fn set_node_id(&self, id: usize) {
        self.0.borrow_mut().node_id = Some(id);
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let inner = self.0.borrow();
        assert!(row < inner.rows && col < inner.cols, "index out of bounds");
        inner.data[row * inner.cols + col]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        let inner = self.0.borrow();
        if inner.rows != 1 || inner.cols != 1 {
            return Err(TensorError::Contract(format!(
                "item() requires a 1x1 tensor, got {}x{}",
                inner.rows, inner.cols
            )));
        }
        Ok(inner.data[0])
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Read access to the raw buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.0.borrow().data)
    }

    /// In-place mutation for optimizers and numeric probes. The caller is
    /// responsible for keeping values finite; optimizers validate after the
    /// full update.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.borrow_mut().data)
    }

    pub fn all_finite(&self) -> bool {
        self.0.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Independent copy: fresh storage, cleared gradient, not on any tape.
    pub fn deep_clone(&self) -> Tensor {
        let inner = self.0.borrow();
        let t = Tensor::new(inner.rows, inner.cols, inner.data.clone(), inner.requires_grad);
        t
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    /// Gradient buffer, all zeros when no gradient reached this tensor.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        let inner = self.0.borrow();
        inner.grad.clone().unwrap_or_else(|| vec![0.0; inner.rows * inner.cols])
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(delta.len(), inner.rows * inner.cols);
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    fn seed_unit_grad(&self) {
        let mut inner = self.0.borrow_mut();
        inner.grad = Some(vec![1.0; inner.rows * inner.cols]);
    }
}

/// Records the forward computation so gradients can be replayed in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    enabled: bool,
    consumed: Cell<bool>,
}

impl Tape {
    /// A recording tape for training.
    pub fn new() -> Tape {
        Tape { nodes: RefCell::new(Vec::new()), enabled: true, consumed: Cell::new(false) }
    }

    /// A non-recording tape for inference; ops run but nothing is traced and
    /// outputs never require gradients.
    pub fn disabled() -> Tape {
        Tape { nodes: RefCell::new(Vec::new()), enabled: false, consumed: Cell::new(false) }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Whether the output of an op over these inputs should be recorded.
    fn should_record(&self, inputs: &[&Tensor]) -> bool {
        self.enabled && inputs.iter().any(|t| t.requires_grad())
    }

    fn record(&self, node: Node) -> Result<()> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        node.output.set_node_id(id);
        node.output.set_requires_grad(true);
        nodes.push(node);
        Ok(())
    }

    /// Runs the reverse pass from `loss`, which must be the 1x1 output of an
    /// op recorded on this tape. Consumes the tape: a second call fails.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        if loss.rows() != 1 || loss.cols() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                loss.rows(),
                loss.cols()
            )));
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.consumed.set(true);
        let on_tape = loss
            .node_id()
            .map(|id| id < nodes.len() && nodes[id].output.same_storage(loss))
            .unwrap_or(false);
        if !on_tape {
            return Err(TensorError::Contract(
                "backward: loss was not produced by an op on this tape".into(),
            ));
        }
        loss.seed_unit_grad();
        for node in nodes.iter().rev() {
            node.backprop()?;
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
