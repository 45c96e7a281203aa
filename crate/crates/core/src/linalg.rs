//! Small dense kernels used by the output heads.
//!
//! Everything is row-major `f64`. The factored layer only ever touches
//! `d x d` matrices and single rows of the `D x d` store on its hot path,
//! so these kernels favour simple, predictable loops over blocking.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps row-major data; panics if the length does not match the shape.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    /// Entries drawn uniformly from `[-scale, scale]`, row by row.
    pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Self {
        let data = if scale > 0.0 {
            (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect()
        } else {
            vec![0.0; rows * cols]
        };
        Matrix { rows, cols, data }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data.chunks_exact(self.cols).map(|r| dot(r, x)).collect()
    }

    /// `y = A^T x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xi) in self.data.chunks_exact(self.cols).zip(x) {
            if xi != 0.0 {
                axpy(xi, r, &mut y);
            }
        }
        y
    }

    /// `A += s * x y^T`
    pub fn rank1_update(&mut self, s: f64, x: &[f64], y: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &xi) in self.data.chunks_exact_mut(self.cols).zip(x) {
            let f = s * xi;
            if f != 0.0 {
                axpy(f, y, r);
            }
        }
    }

    /// `A += x y^T + y x^T + s * y y^T`, written so a symmetric `A` stays
    /// bitwise symmetric.
    pub fn sym_rank2_update(&mut self, x: &[f64], y: &[f64], s: f64) {
        let n = self.rows;
        debug_assert_eq!(self.cols, n);
        for i in 0..n {
            let (xi, yi) = (x[i], y[i]);
            let row = &mut self.data[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += (xi * y[j] + yi * x[j]) + s * (yi * y[j]);
            }
        }
    }

    /// `C = A B`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        out
    }

    /// `A^T A`, accumulated row by row.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in self.data.chunks_exact(n) {
            for i in 0..n {
                let ri = r[i];
                if ri != 0.0 {
                    axpy(ri, r, &mut g.data[i * n..(i + 1) * n]);
                }
            }
        }
        g
    }

    /// Column sums, i.e. `A^T 1`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.data.chunks_exact(self.cols) {
            axpy(1.0, r, &mut s);
        }
        s
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.data)
    }

    /// `|A - B|_F / |B|_F`
    pub fn relative_distance(&self, reference: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (reference.rows, reference.cols));
        let num: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = reference.frobenius_norm();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators give the compiler room to pipeline.
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
