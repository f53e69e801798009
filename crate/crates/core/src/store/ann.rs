//! Inverted-file approximate search over k-means cells of an exact store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kmeans::lloyd;
use super::{Row, Retrieval, StoreSnapshot};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::vecmath::{check_dims, dot, normalize_in_place, similarity_from_parts, sq_norm, unit_f32, EmbeddingVector};

/// Lloyd iterations used to train the coarse quantizer.
pub const TRAIN_ITERATIONS: usize = 25;

#[derive(Debug, Clone)]
pub struct AnnIndex {
    dim: usize,
    centroids: Matrix<f64>,
    lists: Vec<Vec<usize>>,
    rows: Vec<Row>,
    ids: Vec<String>,
}

impl AnnIndex {
    pub fn build(snapshot: &StoreSnapshot, n_lists: usize, seed: u64) -> Result<Self> {
        let rows = snapshot
            .exact_rows()
            .ok_or_else(|| Error::InsufficientData("ANN index needs an exact store".into()))?;
        let count = rows.len();
        if n_lists == 0 || count < n_lists {
            return Err(Error::InsufficientData(format!("{count} records cannot fill {n_lists} lists")));
        }
        let rows: Vec<Row> = rows.iter().cloned().collect();
        let data: Vec<&[f32]> = rows.iter().map(|r| &r.values[..]).collect();
        let data = Matrix::from_rows(&data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let km = lloyd(&data, n_lists, TRAIN_ITERATIONS, &mut rng)?;
        let mut centroids = km.centroids;
        for c in 0..n_lists {
            normalize_in_place(centroids.row_mut(c));
        }
        let mut lists = vec![Vec::new(); n_lists];
        for (i, &c) in km.assignments.iter().enumerate() {
            lists[c].push(i);
        }
        Ok(Self {
            dim: data.cols(),
            centroids,
            lists,
            rows,
            ids: snapshot.records().map(|r| r.id.clone()).collect(),
        })
    }

    pub fn n_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    fn probe_order(&self, q: &[f64], n_probe: usize) -> Vec<usize> {
        let mut cells: Vec<(f64, usize)> =
            self.centroids.row_iter().enumerate().map(|(c, row)| (dot(q, row), c)).collect();
        cells.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cells.into_iter().take(n_probe.clamp(1, self.lists.len())).map(|(_, c)| c).collect()
    }

    /// Scored candidates from the `n_probe` closest cells.
    fn candidates<T: Scalar>(&self, query: &EmbeddingVector<T>, n_probe: usize) -> Result<Vec<(f64, usize)>> {
        check_dims(self.dim, query.dim())?;
        let q = unit_f32(query.as_slice()).ok_or(Error::ZeroNormVector)?;
        let qs = sq_norm(&q);
        let q64: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let mut out = Vec::new();
        for c in self.probe_order(&q64, n_probe) {
            for &i in &self.lists[c] {
                let row = &self.rows[i];
                out.push((similarity_from_parts(dot(&q, &row.values), qs, row.sq), i));
            }
        }
        Ok(out)
    }

    /// Best match among the probed cells; ties resolve to the earliest record
    /// so exhaustive probing reproduces the exact scan.
    pub fn search<T: Scalar>(&self, query: &EmbeddingVector<T>, n_probe: usize) -> Result<Retrieval> {
        let best = self
            .candidates(query, n_probe)?
            .into_iter()
            .fold(None, |best: Option<(f64, usize)>, (s, i)| match best {
                Some((b, j)) if b > s || (b == s && j < i) => Some((b, j)),
                _ => Some((s, i)),
            });
        Ok(match best {
            Some((s, i)) => Retrieval { score: Some(s), record: Some(i), id: Some(self.ids[i].clone()) },
            None => Retrieval::none(),
        })
    }

    /// Top-`k` `(record, score)` among the probed cells, best first.
    pub fn search_top_k<T: Scalar>(&self, query: &EmbeddingVector<T>, n_probe: usize, k: usize) -> Result<Vec<(usize, f64)>> {
        let mut c = self.candidates(query, n_probe)?;
        c.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(c.into_iter().take(k).map(|(s, i)| (i, s)).collect())
    }
}
