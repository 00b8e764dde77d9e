//! Dense row-major matrices and the float abstraction shared by the model
//! and the loss kernels.
//!
//! Training runs in `f32`; gradient checks run the identical code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point scalar usable by every kernel in the crate.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// `C = alpha * op(A) * op(B) + beta * C` with row-major storage.
    ///
    /// `op(A)` is `m x k`, `op(B)` is `k x n`, `C` is `m x n`. When `beta`
    /// is zero the previous contents of `C` are ignored.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal out of range")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // logical (rows x cols); stored transposed when `trans`
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: A too short");
                assert!(b.len() >= k * n, "gemm: B too short");
                assert!(c.len() >= m * n, "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v = if beta == 0.0 { 0.0 } else { *v * beta };
                    }
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                // SAFETY: bounds checked above; strides describe the dense
                // row-major (or transposed) layouts of the given slices.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major `rows x cols` matrix. Pixel-major maps (one row per pixel)
/// use this for features, logits and probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix<F>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("vstack: column mismatch"));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    pub fn cast<G: Real>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64_lossy()).unwrap_or(G::nan()))
                .collect(),
        }
    }
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Row-wise L2 normalization. Returns the normalized rows and the norms
/// (needed for the backward pass).
pub fn l2_normalize_rows<F: Real>(m: &Matrix<F>) -> (Matrix<F>, Vec<F>) {
    let eps = F::lit(1e-12);
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let r = out.row_mut(i);
        let n = dot(r, r).sqrt().max(eps);
        for v in r.iter_mut() {
            *v = *v / n;
        }
        norms.push(n);
    }
    (out, norms)
}

/// Gradient through `y = x / |x|` given the normalized rows `y`, the norms,
/// and `dL/dy`: `dL/dx = (g - y (y . g)) / |x|`.
pub fn l2_normalize_backward<F: Real>(
    normalized: &Matrix<F>,
    norms: &[F],
    grad_out: &Matrix<F>,
) -> Matrix<F> {
    let mut dx = Matrix::zeros(normalized.rows(), normalized.cols());
    for i in 0..normalized.rows() {
        let y = normalized.row(i);
        let g = grad_out.row(i);
        let yg = dot(y, g);
        let n = norms[i];
        for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(y).zip(g) {
            *d = (gv - yv * yg) / n;
        }
    }
    dx
}
