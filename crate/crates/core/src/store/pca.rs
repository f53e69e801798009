//! PCA by subspace iteration with Rayleigh-Ritz on the sample covariance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_columns, symmetric_eigen, Matrix};
use crate::scalar::{cast_slice, Scalar};
use crate::vecmath::EmbeddingVector;

pub const MAX_ITERATIONS: usize = 1000;
pub const SUBSPACE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform<T: Scalar> {
    mean: Vec<T>,
    /// `k x dim`, orthonormal rows.
    components: Matrix<T>,
    explained_variance: Vec<T>,
}

impl<T: Scalar> PcaTransform<T> {
    pub fn from_parts(mean: Vec<T>, components: Matrix<T>, explained_variance: Vec<T>) -> Result<Self> {
        if components.cols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: components.cols() });
        }
        if components.rows() != explained_variance.len() {
            return Err(Error::DimensionMismatch { expected: components.rows(), got: explained_variance.len() });
        }
        Ok(Self { mean, components, explained_variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix<T> {
        &self.components
    }

    pub fn explained_variance(&self) -> &[T] {
        &self.explained_variance
    }

    /// `C (x - mean)`, accumulated in `f64`.
    pub fn project<S: Scalar>(&self, x: &[S]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a.as_f64() - m.as_f64()).collect();
        self.components
            .row_iter()
            .map(|row| row.iter().zip(&centered).map(|(c, v)| c.as_f64() * v).sum())
            .collect()
    }

    /// [`project`](Self::project) rounded to the `f32` storage form.
    pub fn project_f32<S: Scalar>(&self, x: &[S]) -> Vec<f32> {
        self.project(x).into_iter().map(|v| v as f32).collect()
    }

    /// `mean + C^T z`
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.mean.iter().map(|m| m.as_f64()).collect();
        for (row, &zi) in self.components.row_iter().zip(z) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c.as_f64() * zi;
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> PcaTransform<U> {
        PcaTransform {
            mean: cast_slice(&self.mean),
            components: self.components.cast(),
            explained_variance: cast_slice(&self.explained_variance),
        }
    }
}

pub fn fit_pca<T: Scalar>(embeddings: &[EmbeddingVector<T>], k: usize) -> Result<PcaTransform<T>> {
    let rows: Vec<&[T]> = embeddings.iter().map(|e| e.as_slice()).collect();
    fit_pca_rows(&Matrix::from_rows(&rows)?, k)
}

/// Sample covariance (divisor `n - 1`) of the rows of `data`.
pub fn covariance<T: Scalar>(data: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let (n, d) = (data.rows(), data.cols());
    let mut mean = vec![T::zero(); d];
    for row in data.row_iter() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m = *m + x;
        }
    }
    let nf = T::of(n as f64);
    mean.iter_mut().for_each(|m| *m = *m / nf);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![T::zero(); d];
    for row in data.row_iter() {
        for ((c, &x), &m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == T::zero() {
                continue;
            }
            let dst = &mut cov.row_mut(i)[i..];
            for (o, &cj) in dst.iter_mut().zip(&centered[i..]) {
                *o = *o + ci * cj;
            }
        }
    }
    let denom = T::of((n.max(2) - 1) as f64);
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Top-`k` principal components of the rows of `data`.
pub fn fit_pca_rows<T: Scalar>(data: &Matrix<T>, k: usize) -> Result<PcaTransform<T>> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::InsufficientData(format!("PCA needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > d {
        return Err(Error::InsufficientData(format!("PCA k = {k} must be in 1..={d}")));
    }
    let (mean, cov) = covariance(data);
    let (values, vectors) = top_eigenpairs(&cov, k)?;
    let mut components = Matrix::zeros(k, d);
    for j in 0..k {
        let row = components.row_mut(j);
        for (r, dst) in row.iter_mut().enumerate() {
            *dst = vectors[(r, j)];
        }
        fix_sign(row);
    }
    Ok(PcaTransform { mean, components, explained_variance: values })
}

/// First component with magnitude above noise is made positive.
fn fix_sign<T: Scalar>(row: &mut [T]) {
    let tiny = T::of(1e-12);
    if let Some(&first) = row.iter().find(|v| v.abs() > tiny) {
        if first < T::zero() {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Leading `k` eigenpairs of a symmetric positive semi-definite matrix:
/// values non-increasing, vectors as columns (`d x k`).
pub fn top_eigenpairs<T: Scalar>(a: &Matrix<T>, k: usize) -> Result<(Vec<T>, Matrix<T>)> {
    let d = a.rows();
    let p = d.min((2 * k).max(k + 8));
    if p == d {
        let (vals, vecs) = symmetric_eigen(a);
        let mut out = Matrix::zeros(d, k);
        for r in 0..d {
            for j in 0..k {
                out[(r, j)] = vecs[(r, j)];
            }
        }
        return Ok((vals[..k].to_vec(), out));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_9ca);
    let data = (0..d * p).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    let mut q = Matrix::from_vec(d, p, data)?;
    orthonormalize_columns(&mut q);

    let mut previous: Option<Matrix<T>> = None;
    let mut change = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let w = a.matmul(&q);
        let h = q.transpose().matmul(&w);
        let (ritz_vals, v) = symmetric_eigen(&h);
        let ritz = q.matmul(&v);
        let leading = leading_columns(&ritz, k);
        if let Some(prev) = &previous {
            change = subspace_change(prev, &leading);
            if change < SUBSPACE_TOLERANCE {
                return Ok((ritz_vals[..k].to_vec(), leading));
            }
        }
        previous = Some(leading);
        q = w.matmul(&v);
        orthonormalize_columns(&mut q);
    }
    Err(Error::ConvergenceFailure { iterations: MAX_ITERATIONS, residual: change })
}

fn leading_columns<T: Scalar>(m: &Matrix<T>, k: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), k);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[..k]);
    }
    out
}

/// `k - ||A^T B||_F^2` for orthonormal `d x k` bases: the summed squared sines
/// of the principal angles between the two subspaces.
fn subspace_change<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    let k = a.cols();
    let cross = a.transpose().matmul(b);
    let fro: f64 = cross.as_slice().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    (k as f64 - fro).abs()
}
