//! Dense row-major matrices and the handful of kernels the optimizer needs.
//!
//! Embedding matrices are stored `d x L` with one column per token.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>12.6e} ", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Mat::from_vec(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    /// Builds a matrix from column-major data (the on-disk and on-wire order).
    pub fn from_col_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        let mut m = Mat::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m[(i, j)] = data[j * rows + i];
            }
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(m)
    }

    pub fn to_col_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Mat { rows: values.len(), cols: 1, data: values.to_vec() }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Mat {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        let mut out = Mat::zeros(self.rows, end - start);
        for i in 0..self.rows {
            let src = &self.data[i * self.cols + start..i * self.cols + end];
            out.data[i * out.cols..(i + 1) * out.cols].copy_from_slice(src);
        }
        out
    }

    /// Column-wise concatenation.
    pub fn hcat(parts: &[&Mat]) -> Result<Mat> {
        let rows = parts.first().map_or(0, |m| m.rows);
        for p in parts {
            if p.rows != rows {
                return Err(shape_err("hcat", parts[0], p));
            }
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.data[i * cols + offset..i * cols + offset + p.cols]
                    .copy_from_slice(&p.data[i * p.cols..(i + 1) * p.cols]);
                offset += p.cols;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("add_assign", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Mat) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err("dot", self, other));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Mat) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err("max_abs_diff", self, other));
        }
        Ok(self.data.iter().zip(&other.data).fold(0.0, |acc, (a, b)| acc.max((a - b).abs())))
    }
}

fn shape_err(op: &'static str, a: &Mat, b: &Mat) -> Error {
    Error::ShapeMismatch {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

/// Matrix product with fixed i-k-j accumulation order.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", a, b));
    }
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = &a.data[k * a.cols..(k + 1) * a.cols];
        let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
        for (i, aki) in a_row.iter().enumerate() {
            if *aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..b.rows {
            let b_row = &b.data[j * b.cols..(j + 1) * b.cols];
            out.data[i * b.rows + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// Orthonormalizes the columns of `a` with Householder QR.
///
/// The returned `Q` has the same shape as `a`. Column signs are chosen so the
/// triangular factor has a nonnegative diagonal, which makes the map a
/// deterministic function of its input.
pub fn qr_orthonormalize(a: &Mat) -> Result<Mat> {
    let (d, m) = a.shape();
    if m == 0 || m > d {
        return Err(Error::InvalidArgument(format!(
            "qr_orthonormalize needs 1 <= m <= d, got {d}x{m}"
        )));
    }
    a.ensure_finite("qr input")?;

    // work on contiguous columns; r[j] is column j of the triangularized input
    let mut r: Vec<Vec<f64>> = (0..m).map(|j| a.column(j)).collect();
    let mut betas = vec![0.0; m];
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut diag_negative = vec![false; m];
    for k in 0..m {
        let mut x: Vec<f64> = r[k][k..].to_vec();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        // |r_kk| equals the norm of the reflected subcolumn.
        if norm <= 1e-10 {
            return Err(Error::RankDeficient { column: k, pivot: norm });
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        x[0] -= alpha;
        let vnorm2: f64 = x.iter().map(|v| v * v).sum();
        let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
        for col in r.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let s: f64 = x.iter().zip(tail.iter()).map(|(v, c)| v * c).sum::<f64>() * beta;
            for (c, v) in tail.iter_mut().zip(&x) {
                *c -= s * v;
            }
        }
        diag_negative[k] = r[k][k] < 0.0;
        betas[k] = beta;
        vs.push(x);
    }

    // Q = H_0 H_1 ... H_{m-1} applied to the first m columns of the identity.
    let mut q: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();
    for k in (0..m).rev() {
        let v = &vs[k];
        for col in q.iter_mut() {
            let tail = &mut col[k..];
            let s: f64 = v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum::<f64>() * betas[k];
            if s != 0.0 {
                for (c, vi) in tail.iter_mut().zip(v) {
                    *c -= s * vi;
                }
            }
        }
    }
    let mut out = Mat::zeros(d, m);
    for (j, col) in q.iter_mut().enumerate() {
        if diag_negative[j] {
            col.iter_mut().for_each(|c| *c = -*c);
        }
        out.set_column(j, col);
    }
    Ok(out)
}

/// Largest absolute entry of `aᵀa - I`.
pub fn orthonormality_defect(a: &Mat) -> f64 {
    let gram = matmul_tn(a, a).expect("gram shapes always agree");
    let mut worst = 0.0f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn frobenius_norm(a: &Mat) -> f64 {
    a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Square root of the summed squares of every entry of every matrix.
pub fn global_norm(mats: &[&Mat]) -> Result<f64> {
    if mats.is_empty() {
        return Err(Error::InvalidArgument("global_norm of an empty list".into()));
    }
    Ok(mats
        .iter()
        .flat_map(|m| m.as_slice().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt())
}

/// Arithmetic mean over the columns (tokens) of a `d x L` matrix.
pub fn token_mean(x: &Mat) -> Result<Mat> {
    if x.cols() == 0 {
        return Err(Error::InvalidArgument("token_mean of zero tokens".into()));
    }
    let inv = 1.0 / x.cols() as f64;
    let mut out = Mat::zeros(x.rows(), 1);
    for i in 0..x.rows() {
        let row = &x.as_slice()[i * x.cols()..(i + 1) * x.cols()];
        out[(i, 0)] = row.iter().sum::<f64>() * inv;
    }
    Ok(out)
}

/// Seeded xorshift64* generator.
///
/// The state is expanded from the user seed with splitmix64 so that seeds 0
/// and small integers still produce well-mixed streams.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Rng { state: if z == 0 { 0x2545_F491_4F6C_DD1D } else { z }, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Uniform index in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    pub fn gaussian_mat(&mut self, rows: usize, cols: usize) -> Mat {
        let data = (0..rows * cols).map(|_| self.normal()).collect();
        Mat { rows, cols, data }
    }

    pub fn uniform_mat(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        Mat { rows, cols, data }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
