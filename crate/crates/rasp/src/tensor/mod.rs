//! Dense `f64` tensors and a reverse-mode automatic differentiation graph.
//!
//! The op set is exactly what the pooling model needs: matrix multiply,
//! broadcasting elementwise arithmetic, ReLU / sigmoid / exp / ln / cos /
//! arccos, a floor-clamped sqrt, row-wise softmax over the time axis,
//! last-axis reductions, concatenation and tiling along the first axis,
//! and column shifts for same-length TDNN context windows.
//!
//! Numerics are deliberately conservative: everything is 64-bit, softmax
//! subtracts the per-row max, sqrt clamps its argument at [`SQRT_FLOOR`]
//! (with zero gradient below the floor), and arccos clamps its argument
//! away from ±1 by [`ACOS_MARGIN`]. Forward evaluation is sequential and
//! deterministic: identical inputs give bit-identical outputs.

mod gradcheck;
mod graph;

pub use gradcheck::{gradcheck, registered_ops, CoordCheck, GradcheckReport, OpInstance, OpSpec};
pub use graph::{Graph, NodeId, Op, ACOS_MARGIN, SQRT_FLOOR};

use crate::{Error, Result};

/// A dense row-major tensor of 64-bit floats, rank 0 (scalar) to 2.
///
/// `grad` is filled in by [`Graph::backward`] for leaves created with
/// `requires_grad` set; it always has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-2 tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument(
                "from_rows requires non-empty rows of equal length".into(),
            ));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Mark as a differentiable leaf when inserted into a graph.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidArgument(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::InvalidArgument(format!(
                "expected rank-2 tensor, got shape {:?}",
                other
            ))),
        }
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serialize as CSV, one row per first-axis index.
    pub fn to_csv(&self) -> String {
        let (rows, cols) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => (1, 1),
        };
        let mut out = String::new();
        for r in 0..rows {
            let row: Vec<String> = (0..cols)
                .map(|c| format!("{}", self.data[r * cols + c]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}
