//! Dense vector primitives. All reductions accumulate in `f64`
//! regardless of the storage scalar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast_slice, Scalar};

/// Tolerance on the L2 norm for a vector to count as unit length.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// A non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector<T: Scalar> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVector);
        }
        Ok(Self { values })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        cast_slice(&self.values)
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        EmbeddingVector { values: cast_slice(&self.values) }
    }
}

/// Sequential left-to-right dot product in `f64`.
#[inline]
pub fn dot<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.as_f64() * y.as_f64();
    }
    acc
}

/// Sum of squares, accumulated exactly like [`dot`] so that
/// `dot(a, a) == sq_norm(a)` bit for bit.
#[inline]
pub fn sq_norm<T: Scalar>(a: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for x in a {
        let x = x.as_f64();
        acc += x * x;
    }
    acc
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> f64 {
    sq_norm(a).sqrt()
}

/// `a / |a|` rounded to `f32`: the storage form of an embedding. Queries go
/// through the same rounding so an identical text reproduces the stored bits.
pub fn unit_f32<T: Scalar>(a: &[T]) -> Option<Vec<f32>> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| a.iter().map(|v| (v.as_f64() / n) as f32).collect())
}

/// Cosine similarity from a dot product and the two squared norms, clamped
/// to `[-1, 1]`. Every similarity in the crate funnels through here so that
/// store scans and direct calls agree bit for bit.
///
/// The denominator is `sqrt(sq_a * sq_b)` rather than a product of roots:
/// for a vector against itself `sqrt(s * s) == s` exactly, so the score is
/// exactly 1.
#[inline]
pub fn similarity_from_parts(dot: f64, sq_a: f64, sq_b: f64) -> f64 {
    let denom = (sq_a * sq_b).sqrt();
    let denom = if denom.is_finite() && denom > 0.0 { denom } else { sq_a.sqrt() * sq_b.sqrt() };
    (dot / denom).clamp(-1.0, 1.0)
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub fn cosine_similarity_slices<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let (sa, sb) = (sq_norm(a), sq_norm(b));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    Ok(similarity_from_parts(dot(a, b), sa, sb))
}

pub fn cosine_similarity<A: Scalar, B: Scalar>(
    a: &EmbeddingVector<A>,
    b: &EmbeddingVector<B>,
) -> Result<f64> {
    cosine_similarity_slices(a.as_slice(), b.as_slice())
}

/// `1 - cosine_similarity`, in `[0, 2]`.
pub fn cosine_distance<A: Scalar, B: Scalar>(
    a: &EmbeddingVector<A>,
    b: &EmbeddingVector<B>,
) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

pub fn l2_normalize<T: Scalar>(a: &EmbeddingVector<T>) -> Result<EmbeddingVector<T>> {
    let n = a.norm();
    if n == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    Ok(EmbeddingVector {
        values: a.values.iter().map(|&v| T::of(v.as_f64() / n)).collect(),
    })
}

/// Normalize a raw `f64` buffer in place; returns the original norm.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
