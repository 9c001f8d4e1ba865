//! Dense 64-bit tensors and raw matrix kernels.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("dimension mismatch in {op}: shapes {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("class index {class} outside 0..{num_classes}")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("non-finite value in {context} at coordinate {index}")]
    NonFinite { context: String, index: usize },
}

/// A dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match value count {}",
            shape,
            data.len()
        );
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows when viewed as a 2-D matrix (`[rows, cols]`).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len());
        self.shape = shape;
        self
    }
}

/// `c += a @ b` for row-major matrices (`a`: m x k, `b`: k x n).
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a @ b^T` (`a`: m x k, `b`: n x k).
pub fn gemm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a^T @ b` (`a`: k x m, `b`: k x n).
pub fn gemm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_arithmetic() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut c = [0.0, 0.0];
        gemm_acc(&mut c, &a, &b, 2, 2, 1);
        assert_eq!(c, [3.0, 7.0]);
    }

    #[test]
    fn gemm_nt_and_tn_match_explicit_transposes() {
        // a: 2x3, b: 4x3
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect();
        let mut bt = vec![0.0; 12]; // 3x4
        for i in 0..4 {
            for j in 0..3 {
                bt[j * 4 + i] = b[i * 3 + j];
            }
        }
        let mut at = vec![0.0; 6]; // 3x2
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }

        let mut reference = vec![0.0; 8]; // a @ b^T: 2x4
        gemm_acc(&mut reference, &a, &bt, 2, 3, 4);

        let mut nt = vec![0.0; 8];
        gemm_nt_acc(&mut nt, &a, &b, 2, 3, 4);
        assert_eq!(nt, reference);

        let mut tn = vec![0.0; 8];
        gemm_tn_acc(&mut tn, &at, &bt, 2, 3, 4); // (a^T)^T @ bt = a @ b^T
        assert_eq!(tn, reference);
    }

    #[test]
    #[should_panic]
    fn shape_value_count_invariant() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }
}
