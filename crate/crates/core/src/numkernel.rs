//! Dense numeric kernels: row-major `f32` matrices, products, order
//! statistics, truncated SVD and the seeded random stream used everywhere a
//! run has to be reproducible.
//!
//! Storage is `f32`; dot products, norms and the SVD iterate in `f64`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{OwlError, Result};

/// Row-major dense matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix, rejecting a wrong data length or non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(OwlError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(OwlError::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    /// Matrix with i.i.d. `N(0, std²)` entries.
    pub fn random_normal(rows: usize, cols: usize, std: f32, rng: &mut SeededRng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.normal() * std)
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw storage. Callers must keep entries finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0.0).count()
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn scale(&self, c: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += f64::from(a[j]) * f64::from(b[j]);
        acc[1] += f64::from(a[j + 1]) * f64::from(b[j + 1]);
        acc[2] += f64::from(a[j + 2]) * f64::from(b[j + 2]);
        acc[3] += f64::from(a[j + 3]) * f64::from(b[j + 3]);
    }
    let mut tail = 0.0f64;
    for j in chunks * 4..a.len() {
        tail += f64::from(a[j]) * f64::from(b[j]);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail) as f32
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(OwlError::DimensionMismatch(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let bt = b.transpose();
    matmul_transposed(a, &bt)
}

/// `a · bᵀ`, the shape of a linear layer applied to row activations
/// (`x · Wᵀ` with `W` stored as `C_out × C_in`).
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(OwlError::DimensionMismatch(format!(
            "a·bᵀ with a {}x{} and b {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `w · x` for a dense vector `x`.
pub fn matvec(w: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if w.cols != x.len() {
        return Err(OwlError::DimensionMismatch(format!(
            "matvec {}x{} by vector of {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    Ok((0..w.rows).map(|r| dot(w.row(r), x)).collect())
}

/// k-th smallest value (1-indexed); duplicates count separately.
pub fn select_kth_smallest(values: &[f32], k: usize) -> Result<f32> {
    if values.is_empty() {
        return Err(OwlError::Empty("select over empty array".into()));
    }
    if k == 0 || k > values.len() {
        return Err(OwlError::OutOfRange(format!(
            "k = {k} for {} values",
            values.len()
        )));
    }
    let mut buf = values.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f32::total_cmp);
    Ok(*kth)
}

/// Singular value decomposition from one-sided Jacobi rotations.
///
/// Holds `w = Σ_j σ_j · left_j · right_jᵀ` with values sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k` column vectors, `k = min(rows, cols)`.
    pub left: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// `cols`-length vectors.
    pub right: Vec<Vec<f64>>,
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Hestenes one-sided Jacobi on the columns of `cols` (each of length m).
/// Returns the rotated columns (σ_j · u_j) and the accumulated rotation V.
fn one_sided_jacobi(mut cols: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (cols, v)
}

fn rotate_pair(vs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vs.split_at_mut(q);
    let (vp, vq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Full (thin) SVD. Rotations run over the smaller dimension, so the Gram
/// matrix implicitly diagonalised is `min(rows, cols)` square.
pub fn svd(w: &Matrix) -> Svd {
    let (m, n) = w.shape();
    let transposed = m < n;
    // Columns of the matrix we orthogonalise: W's columns, or Wᵀ's.
    let cols: Vec<Vec<f64>> = if transposed {
        (0..m)
            .map(|r| w.row(r).iter().map(|&v| f64::from(v)).collect())
            .collect()
    } else {
        (0..n)
            .map(|c| (0..m).map(|r| f64::from(w.get(r, c))).collect())
            .collect()
    };
    let (rotated, v) = one_sided_jacobi(cols);
    let mut triples: Vec<(f64, Vec<f64>, Vec<f64>)> = rotated
        .into_iter()
        .zip(v)
        .map(|(col, vcol)| {
            let sigma = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            let unit = if sigma > 0.0 {
                col.iter().map(|x| x / sigma).collect()
            } else {
                vec![0.0; col.len()]
            };
            (sigma, unit, vcol)
        })
        .collect();
    triples.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut left = Vec::with_capacity(triples.len());
    let mut values = Vec::with_capacity(triples.len());
    let mut right = Vec::with_capacity(triples.len());
    for (sigma, unit, vcol) in triples {
        values.push(sigma);
        // A·V = U·Σ where A = W (or Wᵀ when transposed).
        if transposed {
            left.push(vcol);
            right.push(unit);
        } else {
            left.push(unit);
            right.push(vcol);
        }
    }
    Svd {
        left,
        values,
        right,
    }
}

/// Singular values of `w`, descending.
pub fn singular_values(w: &Matrix) -> Vec<f64> {
    svd(w).values
}

/// Best rank-`r` factorisation `w ≈ p · q` with `p: rows×r`, `q: r×cols`.
/// Singular values are folded into `p`.
pub fn truncated_svd(w: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let dmin = w.rows.min(w.cols);
    if r == 0 || r > dmin {
        return Err(OwlError::OutOfRange(format!(
            "rank {r} for a {}x{} matrix",
            w.rows, w.cols
        )));
    }
    let dec = svd(w);
    let p = Matrix::from_fn(w.rows, r, |i, j| (dec.left[j][i] * dec.values[j]) as f32);
    let q = Matrix::from_fn(r, w.cols, |i, j| dec.right[i][j] as f32);
    Ok((p, q))
}

/// Deterministic random stream: ChaCha8 seeded through `seed_from_u64`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for sub-task `index` (e.g. a sweep grid point).
    pub fn derive(seed: u64, index: u64) -> Self {
        // splitmix64 finaliser over the pair
        let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Self::new(z ^ (z >> 31))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        self.inner.random_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[0, n]`.
    pub fn up_to(&mut self, n: usize) -> usize {
        self.inner.random_range(0..=n)
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn zero_product() {
        let mut rng = SeededRng::new(3);
        let b = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let c = matmul(&Matrix::zeros(3, 4), &b).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.shape(), (3, 5));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, OwlError::DimensionMismatch(_)));
    }

    #[test]
    fn new_rejects_nan_and_bad_len() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f32::NAN]),
            Err(OwlError::NonFinite(_))
        ));
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0]),
            Err(OwlError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn kth_smallest_examples() {
        assert_eq!(select_kth_smallest(&[3.0, 1.0, 2.0], 2).unwrap(), 2.0);
        assert_eq!(select_kth_smallest(&[5.0, 5.0, 5.0], 3).unwrap(), 5.0);
        assert!(matches!(
            select_kth_smallest(&[], 1),
            Err(OwlError::Empty(_))
        ));
        assert!(matches!(
            select_kth_smallest(&[1.0], 2),
            Err(OwlError::OutOfRange(_))
        ));
        assert!(matches!(
            select_kth_smallest(&[1.0], 0),
            Err(OwlError::OutOfRange(_))
        ));
    }

    #[test]
    fn kth_smallest_matches_sort() {
        let mut rng = SeededRng::new(11);
        let values: Vec<f32> = (0..1000).map(|_| rng.uniform()).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(select_kth_smallest(&values, 100).unwrap(), sorted[99]);
    }

    #[test]
    fn svd_diagonal() {
        let w = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let (p, q) = truncated_svd(&w, 1).unwrap();
        let approx = matmul(&p, &q).unwrap();
        let expect = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 0.0]]);
        assert!(approx.max_abs_diff(&expect) < 1e-6);
        let err: f64 = w
            .data()
            .iter()
            .zip(approx.data())
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum();
        assert!((err - 1.0).abs() < 1e-6);
    }

    #[test]
    fn svd_full_rank_reconstructs() {
        let mut rng = SeededRng::new(5);
        for &(m, n) in &[(7, 4), (4, 7), (6, 6)] {
            let w = Matrix::random_normal(m, n, 1.0, &mut rng);
            let (p, q) = truncated_svd(&w, m.min(n)).unwrap();
            assert!(matmul(&p, &q).unwrap().max_abs_diff(&w) < 1e-5);
        }
    }

    #[test]
    fn svd_rank_out_of_range() {
        let w = Matrix::zeros(3, 2);
        assert!(truncated_svd(&w, 0).is_err());
        assert!(truncated_svd(&w, 3).is_err());
    }

    #[test]
    fn svd_of_zero_matrix() {
        let (p, q) = truncated_svd(&Matrix::zeros(3, 2), 1).unwrap();
        assert!(matmul(&p, &q).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::derive(42, 0);
        let mut d = SeededRng::derive(42, 1);
        assert_ne!(c.next_u64(), d.next_u64());
    }
}
