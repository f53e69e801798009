//! Lloyd's k-means with k-means++ seeding, and the coreset reduction built on it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::vecmath::{normalize_in_place, EmbeddingVector};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Matrix<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, recorded after each
    /// assignment step.
    pub objective_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn iterations(&self) -> usize {
        self.objective_history.len()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn to_f64_matrix<T: Scalar>(points: &Matrix<T>) -> Matrix<f64> {
    points.cast()
}

fn plus_plus_seeds<R: Rng + ?Sized>(points: &Matrix<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = points.row_iter().map(|p| sq_dist(p, points.row(first))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive mass")
        } else {
            // every remaining point duplicates a seed
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    chosen
}

/// Lloyd iterations from k-means++ seeds until the assignment stops changing
/// or `max_iterations` assignment steps have run. Empty clusters keep their
/// previous centroid.
pub fn lloyd<T: Scalar, R: Rng + ?Sized>(
    points: &Matrix<T>,
    k: usize,
    max_iterations: usize,
    rng: &mut R,
) -> Result<KMeansResult> {
    let points = to_f64_matrix(points);
    let (n, d) = (points.rows(), points.cols());
    if n == 0 {
        return Err(Error::InsufficientData("k-means needs at least one point".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InsufficientData(format!("k = {k} must be in 1..={n}")));
    }
    let seeds = plus_plus_seeds(&points, k, rng);
    let mut centroids = Matrix::zeros(k, d);
    for (c, &s) in seeds.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(points.row(s));
    }

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iterations.max(1) {
        let mut changed = false;
        let mut objective = 0.0;
        for (i, p) in points.row_iter().enumerate() {
            let mut best = assignments[i];
            let mut best_d = if best == usize::MAX { f64::INFINITY } else { sq_dist(p, centroids.row(best)) };
            for c in 0..k {
                let dist = sq_dist(p, centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if best != assignments[i] {
                assignments[i] = best;
                changed = true;
            }
            objective += best_d;
        }
        history.push(objective);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = Matrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, p) in points.row_iter().enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = counts[c] as f64;
            for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / inv;
            }
        }
    }
    Ok(KMeansResult { centroids, assignments, objective_history: history, converged })
}

/// `ceil(keep_ratio * count)`, robust to representation error in the ratio.
pub fn coreset_size(count: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * count as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone)]
pub struct Coreset {
    /// Unit-norm centroids.
    pub centroids: Matrix<f64>,
    pub assignments: Vec<usize>,
    pub objective_history: Vec<f64>,
}

/// Reduce `points` to `ceil(keep_ratio * count)` unit-norm centroids.
pub fn coreset_rows<T: Scalar, R: Rng + ?Sized>(points: &Matrix<T>, keep_ratio: f64, rng: &mut R) -> Result<Coreset> {
    let n = points.rows();
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InsufficientData(format!("keep_ratio {keep_ratio} outside (0, 1]")));
    }
    let k = coreset_size(n, keep_ratio);
    if n == 0 || k == 0 {
        return Err(Error::InsufficientData(format!("coreset of {n} points at ratio {keep_ratio} is empty")));
    }
    let (mut centroids, assignments, history) = if k == n {
        (points.cast::<f64>(), (0..n).collect(), vec![0.0])
    } else {
        let r = lloyd(points, k, MAX_LLOYD_ITERATIONS, rng)?;
        (r.centroids, r.assignments, r.objective_history)
    };
    for c in 0..k {
        if normalize_in_place(centroids.row_mut(c)) == 0.0 {
            // centroid at the origin; fall back to its first member
            if let Some(i) = assignments.iter().position(|&a| a == c) {
                let member: Vec<f64> = points.row(i).iter().map(|v| v.as_f64()).collect();
                centroids.row_mut(c).copy_from_slice(&member);
                normalize_in_place(centroids.row_mut(c));
            }
        }
    }
    Ok(Coreset { centroids, assignments, objective_history: history })
}

/// Unit-norm k-means centroids replacing the input set.
pub fn kmeans_coreset<T: Scalar, R: Rng + ?Sized>(
    embeddings: &[EmbeddingVector<T>],
    keep_ratio: f64,
    rng: &mut R,
) -> Result<Vec<EmbeddingVector<T>>> {
    let rows: Vec<&[T]> = embeddings.iter().map(|e| e.as_slice()).collect();
    let coreset = coreset_rows(&Matrix::from_rows(&rows)?, keep_ratio, rng)?;
    coreset
        .centroids
        .row_iter()
        .map(EmbeddingVector::from_f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coreset_size_arithmetic() {
        assert_eq!(coreset_size(1000, 0.1), 100);
        assert_eq!(coreset_size(4000, 0.1), 400);
        assert_eq!(coreset_size(15, 0.1), 2);
        assert_eq!(coreset_size(7, 1.0), 7);
        assert_eq!(coreset_size(3, 0.3), 1);
    }

    #[test]
    fn keep_all_returns_inputs() {
        let pts: Vec<EmbeddingVector<f64>> =
            [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]].iter().map(|p| EmbeddingVector::new(p.to_vec()).unwrap()).collect();
        let out = kmeans_coreset(&pts, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, pts);
    }

    #[test]
    fn duplicates_do_not_break_seeding() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let r = lloyd(&m, 3, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.centroids.rows(), 3);
        assert!(r.objective_history.last().unwrap().abs() < 1e-12);
    }

    #[test]
    fn invalid_k() {
        let m = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(lloyd(&m, 2, 10, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(coreset_rows(&m, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
