//! Dense real linear algebra: vectors, matrices, symmetric matrices with
//! packed storage, Cholesky factorization, Mahalanobis distance, covariance
//! accumulation, and multivariate Gaussian sampling.
//!
//! Everything is `f64`, row-major, and sized for embedding dimensions up to
//! a few hundred. No BLAS, no SIMD: determinism and auditability win at this
//! scale.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector of embedding coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * c).collect())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Dense row-major matrix. The workhorse value type of the tape engine and
/// the backbone weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Single-row matrix view of a vector.
    pub fn row_vector(v: &Vector) -> Self {
        Mat {
            rows: 1,
            cols: v.dim(),
            data: v.0.clone(),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_as_vector(&self, i: usize) -> Vector {
        Vector(self.row(i).to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * c).collect(),
        }
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} by {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(lhs) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Symmetric matrix in packed lower-triangular storage. `M[i][j]` and
/// `M[j][i]` read the same slot, so symmetry holds exactly by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    /// Packed lower triangle, row by row: (0,0), (1,0), (1,1), (2,0), ...
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = SymMatrix::zeros(dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = SymMatrix::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds from a full square matrix, averaging the off-diagonal halves.
    pub fn from_full(m: &Mat) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::DimMismatch(format!(
                "symmetric matrix from {}x{}",
                m.rows, m.cols
            )));
        }
        let mut out = SymMatrix::zeros(m.rows);
        for i in 0..m.rows {
            for j in 0..=i {
                out.set(i, j, 0.5 * (m.at(i, j) + m.at(j, i)));
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    pub fn from_packed(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * (dim + 1) / 2 {
            return Err(Error::DimMismatch(format!(
                "packed length {} for dim {}",
                data.len(),
                dim
            )));
        }
        Ok(SymMatrix { dim, data })
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        r * (r + 1) / 2 + c
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.data[idx] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.data[idx] += v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.at(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_full(&self) -> Mat {
        let mut m = Mat::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.set(i, j, self.at(i, j));
            }
        }
        m
    }
}

/// Lower-triangular Cholesky factor of a (regularized) covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholFactor {
    /// Row-major lower triangle; entries above the diagonal are zero.
    lower: Mat,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    /// Solves L z = b by forward substitution.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.lower.at(i, j) * z[j];
            }
            z[i] = s / self.lower.at(i, i);
        }
        z
    }

    /// Solves L^T v = b by back substitution.
    pub fn backward_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let mut v = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.lower.at(j, i) * v[j];
            }
            v[i] = s / self.lower.at(i, i);
        }
        v
    }

    /// Reconstructs L L^T.
    pub fn reconstruct(&self) -> Mat {
        self.lower.matmul(&self.lower.transpose())
    }
}

/// Adds a trace-scaled ridge so the covariance stays invertible:
/// eps = eps_scale * trace(S) / d, falling back to eps_scale itself when the
/// trace is zero (all-identical embeddings).
pub fn regularize_covariance(s: &SymMatrix, eps_scale: f64) -> Result<SymMatrix> {
    if !s.is_finite() {
        return Err(Error::InvalidInput(
            "covariance has non-finite entries".into(),
        ));
    }
    if eps_scale <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "eps_scale must be positive, got {eps_scale}"
        )));
    }
    let trace = s.trace();
    let eps = if trace == 0.0 {
        eps_scale
    } else {
        eps_scale * trace / s.dim() as f64
    };
    let mut out = s.clone();
    for i in 0..s.dim() {
        out.add_at(i, i, eps);
    }
    Ok(out)
}

/// Cholesky-Banachiewicz factorization of a symmetric positive definite
/// matrix. Fails with the offending pivot index when the matrix is not PD.
pub fn cholesky_decompose(s: &SymMatrix) -> Result<CholFactor> {
    let n = s.dim();
    let mut lower = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s.at(i, j);
            for k in 0..j {
                sum -= lower.at(i, k) * lower.at(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::NotPositiveDefinite {
                        index: i,
                        pivot: sum,
                    });
                }
                lower.set(i, j, sum.sqrt());
            } else {
                lower.set(i, j, sum / lower.at(j, j));
            }
        }
    }
    Ok(CholFactor { lower })
}

/// Mahalanobis distance sqrt((x-y)^T Sigma^{-1} (x-y)) where Sigma = L L^T.
/// Applying Sigma^{-1} = L^{-T} L^{-1} reduces to the Euclidean norm of the
/// forward-substitution solve, which keeps the result nonnegative and exactly
/// symmetric in (x, y).
pub fn mahalanobis_distance(x: &Vector, y: &Vector, l: &CholFactor) -> Result<f64> {
    if x.dim() != y.dim() || x.dim() != l.dim() {
        return Err(Error::DimMismatch(format!(
            "mahalanobis dims: x={}, y={}, L={}",
            x.dim(),
            y.dim(),
            l.dim()
        )));
    }
    let diff: Vec<f64> = x.0.iter().zip(&y.0).map(|(a, b)| a - b).collect();
    let z = l.forward_solve(&diff);
    Ok(z.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Biased covariance estimator (1/N) * sum of outer products of deviations
/// from the given mean. Accumulated directly in packed storage, so the result
/// is symmetric with zero off-diagonal error.
pub fn covariance_from_embeddings(embeddings: &[Vector], mean: &Vector) -> Result<SymMatrix> {
    if embeddings.is_empty() {
        return Err(Error::InvalidInput(
            "covariance of an empty embedding set".into(),
        ));
    }
    let d = mean.dim();
    for (idx, e) in embeddings.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::DimMismatch(format!(
                "embedding {idx} has dim {}, mean has dim {d}",
                e.dim()
            )));
        }
    }
    let mut cov = SymMatrix::zeros(d);
    for e in embeddings {
        let dev: Vec<f64> = e.0.iter().zip(&mean.0).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..=i {
                cov.add_at(i, j, dev[i] * dev[j]);
            }
        }
    }
    let inv_n = 1.0 / embeddings.len() as f64;
    for v in &mut cov.data {
        *v *= inv_n;
    }
    Ok(cov)
}

/// Draws `count` samples from N(mean, L L^T) as mean + L z with z standard
/// normal. Deterministic given the caller's RNG state.
pub fn sample_gaussian<R: Rng>(
    mean: &Vector,
    l: &CholFactor,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vector>> {
    if mean.dim() != l.dim() {
        return Err(Error::DimMismatch(format!(
            "gaussian mean dim {} vs factor dim {}",
            mean.dim(),
            l.dim()
        )));
    }
    let d = mean.dim();
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = mean.0.clone();
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..=i {
                s += l.lower.at(i, j) * z[j];
            }
            out[i] += s;
        }
        samples.push(Vector(out));
    }
    Ok(samples)
}
