//! Dense `f64` tensors with a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value; differentiable computation happens on a
//! [`Graph`], which records each op together with the data its backward
//! rule needs. One graph covers exactly one forward/backward pass.

pub mod fft;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
#[cfg(test)]
mod graph_tests;

pub use fft::ComplexTensor;
pub use graph::{BatchStats, Graph, Var, IGNORE_INDEX};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward already ran on this graph; record a fresh forward pass first")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major array of `f64` with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: extents must be positive")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect()).expect("from_fn: extents must be positive")
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => kernels::add_into(acc, g),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            off = off * ext + ix;
        }
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the maximum along `axis` (ties break toward the lowest
    /// index). The result drops `axis` from the shape.
    pub fn argmax(&self, axis: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if axis >= self.rank() {
            return Err(invalid("argmax", format!("axis {axis} for rank {}", self.rank())));
        }
        let (outer, n, inner) = kernels::split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = self.data[o * n * inner + i];
                for a in 1..n {
                    let v = self.data[(o * n + a) * inner + i];
                    if v > best_v {
                        best = a;
                        best_v = v;
                    }
                }
                out.push(best);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok((shape, out))
    }
}

/// One-hot encodes `indices` (laid out with `index_shape`), inserting a
/// class axis of size `classes` at position `axis`. Entries equal to
/// [`IGNORE_INDEX`] encode as all-zero.
pub fn one_hot(
    indices: &[usize],
    index_shape: &[usize],
    classes: usize,
    axis: usize,
) -> Result<Tensor> {
    let n: usize = index_shape.iter().product();
    if n != indices.len() || axis > index_shape.len() || classes == 0 {
        return Err(shape_err(
            "one_hot",
            format!("{} indices for shape {index_shape:?}, axis {axis}", indices.len()),
        ));
    }
    let outer: usize = index_shape[..axis].iter().product();
    let inner: usize = index_shape[axis..].iter().product();
    let mut shape = index_shape.to_vec();
    shape.insert(axis, classes);
    let mut data = vec![0.0; n * classes];
    for o in 0..outer {
        for i in 0..inner {
            let c = indices[o * inner + i];
            if c == IGNORE_INDEX {
                continue;
            }
            if c >= classes {
                return Err(invalid("one_hot", format!("class {c} >= {classes}")));
            }
            data[(o * classes + c) * inner + i] = 1.0;
        }
    }
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(t.argmax(1).unwrap().1, vec![0, 1]);
        assert_eq!(t.argmax(0).unwrap().1, vec![0, 1, 1]);
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let idx = vec![2, 0, 1, 1];
        let t = one_hot(&idx, &[2, 2], 3, 1).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2]);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|c| t.at(&[o, c, i])).sum();
                assert_eq!(s, 1.0);
                assert_eq!(t.at(&[o, idx[o * 2 + i], i]), 1.0);
            }
        }
        let t = one_hot(&[1, IGNORE_INDEX], &[2], 2, 1).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
