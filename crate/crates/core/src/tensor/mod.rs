//! Dense `f64` tensors and a small reverse-mode differentiation tape.
//!
//! The tape ([`Graph`]) only knows the primitives the forecaster needs:
//! linear maps, broadcasting elementwise arithmetic, a handful of
//! activations, softmax, reductions, concat/slice, gather, reshapes and a
//! dilated causal convolution along the time axis. Every primitive carries
//! an exact vector-Jacobian product; [`grad_check`] compares those against
//! central finite differences.

mod gradcheck;
mod graph;
mod param;
pub mod snapshot;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GmrlError, Result};

pub use gradcheck::{grad_check, grad_check_piecewise, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use param::{Init, ParamId, ParamStore, Parameter};

/// Ordered list of extents. Every extent is at least one and the rank is
/// at most [`Shape::MAX_RANK`]; rank zero denotes a scalar.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub const MAX_RANK: usize = 5;

    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() > Self::MAX_RANK {
            return Err(GmrlError::InvalidShape(format!(
                "rank {} exceeds the maximum of {}",
                dims.len(),
                Self::MAX_RANK
            )));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(GmrlError::InvalidShape(format!(
                "extent {pos} of {dims:?} is zero"
            )));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Splits the shape around `axis` into (outer, extent, inner) counts.
    pub(crate) fn lanes(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.0[..axis].iter().product();
        let inner = self.0[axis + 1..].iter().product();
        (outer, self.0[axis], inner)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = GmrlError;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.0
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(GmrlError::InvalidShape(format!(
                "{} values do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.rank());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(self.shape.dims()).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of {}", self.shape);
            off = off * d + ix;
        }
        off
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(GmrlError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rules() {
        assert!(Shape::new(vec![2, 0]).is_err());
        assert!(Shape::new(vec![1; 6]).is_err());
        let s = Shape::new(vec![2, 3, 4]).unwrap();
        assert_eq!(s.numel(), 24);
        assert_eq!(s.strides(), vec![12, 4, 1]);
        assert_eq!(Shape::scalar().numel(), 1);
        assert_eq!(s.to_string(), "(2, 3, 4)");
    }

    #[test]
    fn tensor_length_must_match_shape() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.at(&[2, 0]), 4.0);
    }

    #[test]
    fn shape_serde_rejects_zero_extent() {
        let s: std::result::Result<Shape, _> = serde_json::from_str("[3, 0]");
        assert!(s.is_err());
    }
}
