//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values live in a [`Graph`]: leaves are inserted with [`Graph::leaf`],
//! every operation records itself on the tape, and [`Graph::backward`]
//! replays the tape in reverse creation order to populate gradients.
//! All storage is flat row-major `Vec<f64>`. Operations reject non-finite
//! outputs instead of propagating them silently.

mod check;
mod graph;

pub use check::{grad_check, grad_check_multi};
pub use graph::{Graph, NodeId};

use std::fmt;

/// Result alias for tensor and graph operations.
pub type TensorResult<T> = Result<T, TensorError>;

/// Errors raised by tensor construction, graph operations, and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shape product disagrees with the data length.
    ShapeDataMismatch { shape: Vec<usize>, data_len: usize },
    /// Operand shapes are incompatible for the named operation.
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// The operation requires a rank-2 operand.
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    /// An operation produced (or was handed) a NaN/Inf value.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// A pooling window cannot cover even one position: n + 2·pad < kernel.
    PoolingDegeneracy { len: usize, kernel: usize, pad: usize },
    /// 2D pooling requires a perfect-square token count.
    NotSquareTokenCount { len: usize },
    /// An index (row, column, or class label) is out of bounds.
    IndexOutOfBounds { op: &'static str, index: usize, bound: usize },
    /// Finite-difference step outside the supported [1e-6, 1e-4] range.
    StepOutOfRange { h: f64 },
    /// Concatenation requires at least one part.
    EmptyConcat { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, data_len } => {
                write!(f, "shape {:?} implies {} elements, data has {}", shape, shape.iter().product::<usize>(), data_len)
            }
            TensorError::DimensionMismatch { op, lhs, rhs } => {
                write!(f, "{}: incompatible shapes {:?} and {:?}", op, lhs, rhs)
            }
            TensorError::NotAMatrix { op, shape } => {
                write!(f, "{}: expected a matrix, got shape {:?}", op, shape)
            }
            TensorError::NonFinite { op } => write!(f, "{}: non-finite value (overflow is an error)", op),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be a scalar, got shape {:?}", shape)
            }
            TensorError::PoolingDegeneracy { len, kernel, pad } => {
                write!(f, "pooling degeneracy: length {} + 2*{} pad < kernel {}", len, pad, kernel)
            }
            TensorError::NotSquareTokenCount { len } => {
                write!(f, "token count {} is not a perfect square", len)
            }
            TensorError::IndexOutOfBounds { op, index, bound } => {
                write!(f, "{}: index {} out of bounds {}", op, index, bound)
            }
            TensorError::StepOutOfRange { h } => {
                write!(f, "grad_check: step {} outside [1e-6, 1e-4]", h)
            }
            TensorError::EmptyConcat { op } => write!(f, "{}: nothing to concatenate", op),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional array of f64 in row-major order, with an optional
/// gradient slot and a link to the graph node that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeDataMismatch { shape, data_len: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None, node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None, node: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None, node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1, 1], vec![value]).expect("scalar shape")
    }

    /// 1-D tensor from a slice.
    pub fn vector(data: &[f64]) -> Self {
        Tensor::new(vec![data.len()], data.to_vec()).expect("vector shape")
    }

    /// rows × cols matrix from flat row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> TensorResult<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Matrix from a list of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> TensorResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ShapeDataMismatch { shape: vec![r, c], data_len: row.len() });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix (or a vector seen as one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 { self.shape[0] } else { 1 }
    }

    /// Column count of a matrix (or the length of a vector).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Graph node that produced this tensor, if it ever entered a graph.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn set_node(&mut self, id: NodeId) {
        self.node = Some(id);
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }
}

/// Output length of a strided window over `n` positions: ⌊(n + 2·pad − k)/s⌋ + 1.
///
/// With k=3, s=2, pad=1 this is ⌈n/2⌉; with the pad=0 default it is ⌈(n−1)/2⌉.
pub fn pooled_length(n: usize, kernel: usize, stride: usize, pad: usize) -> TensorResult<usize> {
    if n == 0 || kernel == 0 || stride == 0 {
        return Err(TensorError::PoolingDegeneracy { len: n, kernel, pad });
    }
    if n + 2 * pad < kernel {
        return Err(TensorError::PoolingDegeneracy { len: n, kernel, pad });
    }
    Ok((n + 2 * pad - kernel) / stride + 1)
}

/// Integer square root when `n` is a perfect square.
pub fn exact_sqrt(n: usize) -> TensorResult<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g == n {
        Ok(g)
    } else {
        Err(TensorError::NotSquareTokenCount { len: n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn pooled_length_matches_closed_form() {
        // k=3, s=2, pad=1 halves the sequence, rounding up.
        assert_eq!(pooled_length(196, 3, 2, 1).unwrap(), 98);
        assert_eq!(pooled_length(1, 3, 2, 1).unwrap(), 1);
        for n in 1..200usize {
            assert_eq!(pooled_length(n, 3, 2, 1).unwrap(), n.div_ceil(2));
        }
    }

    #[test]
    fn pooled_length_chain_halves_repeatedly() {
        let mut n = 196;
        for expect in [98, 49, 25, 13] {
            n = pooled_length(n, 3, 2, 1).unwrap();
            assert_eq!(n, expect);
        }
    }

    #[test]
    fn pooled_length_degeneracy_is_an_error() {
        let err = pooled_length(1, 3, 2, 0).unwrap_err();
        assert!(matches!(err, TensorError::PoolingDegeneracy { len: 1, kernel: 3, pad: 0 }));
        assert!(pooled_length(2, 3, 2, 0).is_err());
        assert!(pooled_length(3, 3, 2, 0).is_ok());
    }

    #[test]
    fn exact_sqrt_accepts_squares_only() {
        assert_eq!(exact_sqrt(196).unwrap(), 14);
        assert_eq!(exact_sqrt(1).unwrap(), 1);
        assert!(exact_sqrt(195).is_err());
    }
}
