// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f64` matrices and the handful of kernels the model needs.
//!
//! Products go through `matrixmultiply::dgemm`. Every output element is a
//! dot product accumulated in a fixed order that does not depend on the
//! number of rows in the left operand, so computing rows one at a time
//! (incremental decoding) and all at once (teacher forcing) agree bitwise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn push_row(&mut self, row: &[f64]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols, "row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (a, b) in row.iter_mut().zip(bias) {
                *a += b;
            }
        }
    }

    /// Column sums (the bias gradient of a linear layer).
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.rows_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Rounds every entry through `f32`, so the matrix survives a float32
    /// checkpoint unchanged.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: strides describe in-bounds row-major views of the given slices,
    // whose lengths are checked by the callers below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// `a · b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut c = Matrix::zeros(a.rows, b.cols);
    dgemm(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        &mut c.data,
        0.0,
    );
    c
}

/// `a · bᵀ`
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    let mut c = Matrix::zeros(a.rows, b.rows);
    dgemm(
        a.rows,
        a.cols,
        b.rows,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        &mut c.data,
        0.0,
    );
    c
}

/// `acc += aᵀ · b`
pub fn matmul_at_acc(a: &Matrix, b: &Matrix, acc: &mut Matrix) {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    assert_eq!(acc.shape(), (a.cols, b.cols));
    dgemm(
        a.cols,
        a.rows,
        b.cols,
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
        &mut acc.data,
        1.0,
    );
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by descending value, ties broken by lower index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    #[test]
    fn products_match_naive_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::randn(7, 5, 1.0, &mut rng);
        let b = Matrix::randn(5, 9, 1.0, &mut rng);
        let c = matmul(&a, &b);
        let want = naive(&a, &b);
        for (x, y) in c.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = b.transpose();
        let c2 = matmul_bt(&a, &bt);
        assert_eq!(c2.shape(), (7, 9));
        for (x, y) in c2.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut acc = Matrix::zeros(5, 9);
        matmul_at_acc(&a, &c, &mut acc);
        let want2 = naive(&a.transpose(), &c);
        for (x, y) in acc.data().iter().zip(want2.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn row_results_do_not_depend_on_batch_height() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::randn(37, 64, 1.0, &mut rng);
        let w = Matrix::randn(64, 192, 0.1, &mut rng);
        let full = matmul(&a, &w);
        for i in [0, 5, 17, 36] {
            let single = matmul(&a.slice_rows(i, i + 1), &w);
            assert_eq!(single.row(0), full.row(i));
        }
    }

    #[test]
    fn softmax_sums_to_one_and_argmax_prefers_low_index() {
        let p = softmax(&[1.0, 3.0, 3.0, -2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, -2.0]), 1);
        assert_eq!(rank_descending(&[1.0, 3.0, 3.0, -2.0]), vec![1, 2, 0, 3]);
    }
}
