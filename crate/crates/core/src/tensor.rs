//! Dense `f64` tensors in row-major layout.
//!
//! Activations are `[C, H, W]`, convolution weights `[C_out, C_in, K, K]`,
//! per-channel vectors `[C]` or `[C, 1, 1]`, scalars `[1]`. Everything in the
//! network path runs in `f64` so finite-difference gradient checks are not
//! limited by accumulation noise.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Channel count of a `[C, H, W]` tensor.
    pub fn c(&self) -> usize {
        self.dims[0]
    }

    pub fn h(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn w(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    /// Splits a `[C, H, W]` shape into its three extents.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.dims.len(), 3, "expected a CxHxW tensor, got {:?}", self.dims);
        (self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.dims, other.dims, "zip_map on mismatched dims");
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Ensures every element lies in `[lo, hi]`.
    pub fn check_range(&self, lo: f64, hi: f64, what: &str) -> Result<()> {
        for &v in &self.data {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Range(format!(
                    "{what}: value {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference; dims must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Exact bitwise equality, used by determinism checks.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, all row-major contiguous.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] = a^T[m x k] * b[k x n] + beta * c` where `a` is stored `[k x m]`.
pub(crate) fn gemm_at(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] = a[m x k] * b^T[k x n] + beta * c` where `b` is stored `[n x k]`.
pub(crate) fn gemm_bt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
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
            beta,
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
    fn gemm_matches_naive() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, a.data(), b.data(), 0.0, &mut c);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_variants() {
        // a = [[1,2],[3,4],[5,6]] stored [3x2]; a^T is [2x3]
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3x2]
        let mut c = vec![0.0; 4];
        gemm_at(2, 3, 2, &a, &b, 0.0, &mut c);
        // a^T*b = [[1,3,5],[2,4,6]] * [[7,8],[9,10],[11,12]]
        assert_eq!(c, vec![89.0, 98.0, 116.0, 128.0]);

        let a2 = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2x3]
        let b2 = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // [2x3] = b^T
        let mut c2 = vec![0.0; 4];
        gemm_bt(2, 3, 2, &a2, &b2, 0.0, &mut c2);
        assert_eq!(c2, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn range_check_rejects_out_of_bounds() {
        let t = Tensor::from_vec(&[3], vec![0.0, 0.5, 1.2]);
        assert!(t.check_range(0.0, 1.0, "ldr").is_err());
        let ok = Tensor::from_vec(&[3], vec![0.0, 0.5, 1.0]);
        assert!(ok.check_range(0.0, 1.0, "ldr").is_ok());
    }
}
