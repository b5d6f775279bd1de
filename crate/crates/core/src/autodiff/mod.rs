//! Dense row-major tensors with a tape-based reverse-mode gradient engine.
//!
//! Training runs in `f32`; gradient verification runs the same graph code
//! in `f64`. Matrix products go through `matrixmultiply`'s strided GEMM
//! kernels, everything else is plain loops with a fixed summation order.

mod adam;
mod functional;
mod gradcheck;
mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::FromPrimitive;
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use functional::{cross_entropy_loss, dropout, layer_norm, softmax_rows, DropoutMode};
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Graph, Var};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} needs {expected} values, got {found}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("dropout probability must lie in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("attention row has no unmasked key")]
    AllMasked,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Scalar element type of a tensor.
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `C = alpha * A B + beta * C` for strided row/column layouts.
    ///
    /// # Safety
    /// Every element addressed through the given offsets and strides must
    /// lie inside the slices. [`gemm`] checks this before calling.
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatLayout {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatLayout {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0
            || self.cols == 0
            || self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// Safe strided GEMM: `c = alpha * a b + beta * c`.
pub(crate) fn gemm<T: Float>(
    alpha: T,
    a: &[T],
    la: MatLayout,
    b: &[T],
    lb: MatLayout,
    beta: T,
    c: &mut [T],
    lc: MatLayout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!((la.rows, lb.cols), (lc.rows, lc.cols), "gemm output shape");
    assert!(la.fits(a.len()) && lb.fits(b.len()) && lc.fits(c.len()), "gemm layout out of bounds");
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    // SAFETY: bounds of all three layouts were checked above.
    unsafe {
        T::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeData {
                shape: shape.to_vec(),
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimensions flattened: `[a, b, c]` -> `(a*b, c)`.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        if cols == 0 {
            return (0, 0);
        }
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(AutodiffError::ShapeData {
                shape: shape.to_vec(),
                expected,
                found: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_strided_transpose() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4];
        gemm(1.0, &a, MatLayout::dense(2, 3), &b, MatLayout::dense(3, 2), 0.0, &mut c, MatLayout::dense(2, 2));
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T a (3x3)
        let mut d = [0.0f64; 9];
        let la = MatLayout::dense(2, 3);
        gemm(1.0, &a, la.t(), &a, la, 0.0, &mut d, MatLayout::dense(3, 3));
        assert_eq!(d[0], 1.0 + 16.0);
        assert_eq!(d[1], 2.0 + 20.0);
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::new(&[2, 3, 4], vec![0.0; 24]).unwrap();
        assert_eq!(t.rows_cols(), (6, 4));
        let c: Tensor<f64> = t.cast();
        assert_eq!(c.shape(), &[2, 3, 4]);
    }
}
