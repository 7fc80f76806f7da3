//! Dense row-major `f64` matrices.
//!
//! Products use a fixed summation order: every output cell is accumulated
//! left to right over the shared dimension, starting from `0.0`, exactly as a
//! textbook triple loop would. The blocked kernel below only changes *which*
//! cells are in flight at once, never the order of additions within a cell,
//! and never fuses multiply-add, so results are bit-identical to the naive
//! loop on every target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices get an explicit path.
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        // 8x8 tiles keep both sides cache friendly for the layer sizes used here.
        const T: usize = 8;
        for i0 in (0..self.rows).step_by(T) {
            for j0 in (0..self.cols).step_by(T) {
                for i in i0..(i0 + T).min(self.rows) {
                    for j in j0..(j0 + T).min(self.cols) {
                        out.data[j * self.rows + i] = self.data[i * self.cols + j];
                    }
                }
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(
            &self.data,
            &rhs.data,
            &mut out.data,
            self.rows,
            self.cols,
            rhs.cols,
        );
        Ok(out)
    }

    /// Adds `v` to every row in place.
    pub fn add_row_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::shape(
                "add_row_vector",
                format!("vector of {} for {} columns", v.len(), self.cols),
            ));
        }
        if self.cols == 0 {
            return Ok(());
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Column sums, each accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        sums
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    /// New matrix made of the listed rows, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = a * b` for row-major `a` (m x k), `b` (k x n), `c` (m x n).
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime just above.
            unsafe { gemm_avx2(a, b, c, m, k, n) };
            return;
        }
    }
    gemm_body(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn gemm_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_body(a, b, c, m, k, n);
}

const MR: usize = 4;
const NR: usize = 8;
/// Depth of one pass over the shared dimension. Later passes resume each
/// cell's running sum from `c`, which preserves the left-to-right order.
const KC: usize = 256;

#[inline(always)]
fn gemm_body(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let full_cols = n - n % NR;
    let full_rows = m - m % MR;
    for k0 in (0..k).step_by(KC) {
        let k1 = (k0 + KC).min(k);
        let resume = k0 > 0;
        for j in (0..full_cols).step_by(NR) {
            for i in (0..full_rows).step_by(MR) {
                micro_kernel(a, b, c, i, j, k0, k1, k, n, resume);
            }
            for i in full_rows..m {
                let mut acc = [0.0f64; NR];
                if resume {
                    acc.copy_from_slice(&c[i * n + j..i * n + j + NR]);
                }
                for p in k0..k1 {
                    let x = a[i * k + p];
                    let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                    for q in 0..NR {
                        acc[q] += x * brow[q];
                    }
                }
                c[i * n + j..i * n + j + NR].copy_from_slice(&acc);
            }
        }
        for i in 0..m {
            for j in full_cols..n {
                let mut acc = if resume { c[i * n + j] } else { 0.0 };
                for p in k0..k1 {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn micro_kernel(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    i: usize,
    j: usize,
    k0: usize,
    k1: usize,
    k: usize,
    n: usize,
    resume: bool,
) {
    let a0 = &a[i * k + k0..i * k + k1];
    let a1 = &a[(i + 1) * k + k0..(i + 1) * k + k1];
    let a2 = &a[(i + 2) * k + k0..(i + 2) * k + k1];
    let a3 = &a[(i + 3) * k + k0..(i + 3) * k + k1];
    let mut acc = [[0.0f64; NR]; MR];
    if resume {
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
        }
    }
    for p in 0..k1 - k0 {
        let off = (k0 + p) * n + j;
        let brow: &[f64; NR] = b[off..off + NR].try_into().unwrap();
        let x = [a0[p], a1[p], a2[p], a3[p]];
        for r in 0..MR {
            for q in 0..NR {
                acc[r][q] += x[r] * brow[q];
            }
        }
    }
    for r in 0..MR {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&Matrix::zeros(2, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn matches_triple_loop_bit_for_bit() {
        let mut rng = RngStream::new(17);
        let a = random(5, 4, &mut rng);
        let b = random(4, 3, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = naive(&a, &b);
        assert!(got.max_abs_diff(&want) <= 1e-12);
        assert_eq!(got, want);
        // Shapes that exercise full tiles plus both tails.
        for &(m, k, n) in &[(9, 13, 17), (8, 8, 16), (1, 30, 9), (12, 1, 8), (3, 0, 5), (6, 600, 11)] {
            let a = random(m, k, &mut rng);
            let b = random(k, n, &mut rng);
            assert_eq!(a.matmul(&b).unwrap(), naive(&a, &b), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn right_identity_is_exact() {
        let mut rng = RngStream::new(3);
        let a = random(7, 11, &mut rng);
        assert_eq!(a.matmul(&Matrix::identity(11)).unwrap(), a);
    }

    #[test]
    fn transpose_and_helpers() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let t = a.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.row(2), &[3.0, 6.0]);
        assert_eq!(t.transpose(), a);
        assert_eq!(a.column_sums(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.gather_rows(&[1, 1]).row(1), &[4.0, 5.0, 6.0]);
        let mut b = a.clone();
        b.add_row_vector(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(b.row(0), &[2.0, 3.0, 4.0]);
        assert!(b.add_row_vector(&[1.0]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
