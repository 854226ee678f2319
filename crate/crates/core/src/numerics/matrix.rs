use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting empty shapes,
    /// length mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * x` for a vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    /// Writes `self * x` into `y`.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (yi, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *yi = dot(row, x);
        }
    }

    /// Accumulates `selfᵀ * x` into `y`.
    pub fn matvec_transpose_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        dispatch!(
            matvec_t_kernel,
            matvec_t_512,
            matvec_t_256,
            (&self.data, self.cols, x, y)
        )
    }

    /// `self += Aᵀ B` where row `i` of `A` is `a[i * a_stride + a_offset..][..rows]`
    /// and `B` is `b` read as a row-major `L × cols` matrix.
    pub(crate) fn add_transpose_product(
        &mut self,
        a: &[f64],
        a_stride: usize,
        a_offset: usize,
        b: &[f64],
    ) {
        let len = b.len() / self.cols;
        debug_assert_eq!(b.len(), len * self.cols);
        debug_assert!(len == 0 || a.len() >= (len - 1) * a_stride + a_offset + self.rows);
        let cols = self.cols;
        dispatch!(
            transpose_product_kernel,
            transpose_product_512,
            transpose_product_256,
            (&mut self.data, cols, a, a_stride, a_offset, b)
        )
    }

    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (&ui, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ui == 0.0 {
                continue;
            }
            axpy(ui, v, row);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent partial sums let the compiler vectorize
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Body of [`Matrix::matvec_transpose_acc`].
#[inline(always)]
fn matvec_t_kernel(data: &[f64], c: usize, x: &[f64], y: &mut [f64]) {
    let y = &mut y[..c];
    // four rows per pass: one load/store of y per four multiply-adds
    let mut blocks = data.chunks_exact(4 * c);
    let mut xs = x.chunks_exact(4);
    for (blk, xv) in (&mut blocks).zip(&mut xs) {
        let (r0, rest) = blk.split_at(c);
        let (r1, rest) = rest.split_at(c);
        let (r2, r3) = rest.split_at(c);
        axpy4([xv[0], xv[1], xv[2], xv[3]], [r0, r1, r2, r3], y);
    }
    for (row, &xi) in blocks.remainder().chunks_exact(c).zip(xs.remainder()) {
        axpy(xi, row, y);
    }
}

/// Body of [`Matrix::add_transpose_product`].
#[inline(always)]
fn transpose_product_kernel(
    data: &mut [f64],
    c: usize,
    a: &[f64],
    a_stride: usize,
    a_offset: usize,
    b: &[f64],
) {
    let len = b.len() / c;
    for (j, out) in data.chunks_exact_mut(c).enumerate() {
        let coef = |i: usize| a[i * a_stride + a_offset + j];
        let mut i = 0;
        while i + 4 <= len {
            let blk = &b[i * c..(i + 4) * c];
            let (r0, rest) = blk.split_at(c);
            let (r1, rest) = rest.split_at(c);
            let (r2, r3) = rest.split_at(c);
            axpy4(
                [coef(i), coef(i + 1), coef(i + 2), coef(i + 3)],
                [r0, r1, r2, r3],
                out,
            );
            i += 4;
        }
        while i < len {
            axpy(coef(i), &b[i * c..(i + 1) * c], out);
            i += 1;
        }
    }
}

/// Wider-register builds of the hot kernels, selected at run time.
///
/// Only the vector width changes. Fused multiply-add stays disabled, so every
/// lane performs the same IEEE operations in the same order and results are
/// bit-identical to the portable build.
#[cfg(target_arch = "x86_64")]
mod wide {
    macro_rules! wrap {
        ($feature:literal, $name:ident, $kernel:ident($($arg:ident: $ty:ty),*)) => {
            #[target_feature(enable = $feature)]
            pub(super) unsafe fn $name($($arg: $ty),*) {
                super::$kernel($($arg),*)
            }
        };
    }
    wrap!("avx512f", matvec_t_512, matvec_t_kernel(data: &[f64], c: usize, x: &[f64], y: &mut [f64]));
    wrap!("avx2", matvec_t_256, matvec_t_kernel(data: &[f64], c: usize, x: &[f64], y: &mut [f64]));
    wrap!("avx512f", transpose_product_512, transpose_product_kernel(data: &mut [f64], c: usize, a: &[f64], s: usize, o: usize, b: &[f64]));
    wrap!("avx2", transpose_product_256, transpose_product_kernel(data: &mut [f64], c: usize, a: &[f64], s: usize, o: usize, b: &[f64]));
}

/// Calls the widest available build of a kernel.
macro_rules! dispatch {
    ($kernel:ident, $w512:ident, $w256:ident, ($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the required CPU feature was detected above
                return unsafe { wide::$w512($($arg),*) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the required CPU feature was detected above
                return unsafe { wide::$w256($($arg),*) };
            }
        }
        $kernel($($arg),*)
    }};
}
use dispatch;

/// `y += Σ_t alpha[t] * x[t]`, all slices of `y`'s length.
#[inline(always)]
fn axpy4(alpha: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
    let n = y.len();
    let (a, b, c, d) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for ((((yk, a), b), c), d) in y.iter_mut().zip(a).zip(b).zip(c).zip(d) {
        *yk += alpha[0] * a + alpha[1] * b + alpha[2] * c + alpha[3] * d;
    }
}

/// `y += alpha * x`
#[inline(always)]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
