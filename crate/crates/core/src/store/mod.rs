//! The forget-embedding store.
//!
//! Writers are serialized through one mutex; readers grab an immutable
//! [`StoreSnapshot`] (an `Arc` clone under a briefly held read lock) and scan
//! it without holding any lock. A snapshot taken after `add` returns always
//! contains the new record.

pub mod ann;
pub mod kmeans;
pub mod pca;
pub mod quant;

use std::collections::HashSet;
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::vecmath::{check_dims, dot, norm, similarity_from_parts, sq_norm, unit_f32, EmbeddingVector};

use self::kmeans::coreset_rows;
use self::pca::{fit_pca_rows, PcaTransform};
use self::quant::{quantize_8bit, QuantizedBlock};

const SEGMENT: usize = 256;

/// Append-only sequence with structural sharing: pushing copies at most one
/// segment, so older versions stay valid for readers.
#[derive(Debug)]
pub(crate) struct AppendLog<T> {
    sealed: Arc<Vec<Arc<Vec<T>>>>,
    tail: Arc<Vec<T>>,
    len: usize,
}

impl<T> Clone for AppendLog<T> {
    fn clone(&self) -> Self {
        Self { sealed: self.sealed.clone(), tail: self.tail.clone(), len: self.len }
    }
}

impl<T: Clone> AppendLog<T> {
    pub(crate) fn new() -> Self {
        Self { sealed: Arc::new(Vec::new()), tail: Arc::new(Vec::new()), len: 0 }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn pushed(&self, item: T) -> Self {
        if self.tail.len() < SEGMENT {
            let mut tail = Vec::with_capacity(SEGMENT);
            tail.extend(self.tail.iter().cloned());
            tail.push(item);
            Self { sealed: self.sealed.clone(), tail: Arc::new(tail), len: self.len + 1 }
        } else {
            let mut sealed = Vec::with_capacity(self.sealed.len() + 1);
            sealed.extend(self.sealed.iter().cloned());
            sealed.push(self.tail.clone());
            let mut tail = Vec::with_capacity(SEGMENT);
            tail.push(item);
            Self { sealed: Arc::new(sealed), tail: Arc::new(tail), len: self.len + 1 }
        }
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = &T> + '_ {
        self.sealed.iter().flat_map(|s| s.iter()).chain(self.tail.iter())
    }

    pub(crate) fn get(&self, i: usize) -> Option<&T> {
        let seg = i / SEGMENT;
        if seg < self.sealed.len() {
            self.sealed[seg].get(i % SEGMENT)
        } else if seg == self.sealed.len() {
            self.tail.get(i % SEGMENT)
        } else {
            None
        }
    }
}

/// A stored vector with its precomputed squared norm.
#[derive(Debug, Clone)]
pub(crate) struct Row {
    pub(crate) values: Arc<[f32]>,
    pub(crate) sq: f64,
}

impl Row {
    pub(crate) fn new(values: Vec<f32>) -> Self {
        let sq = sq_norm(&values);
        Self { values: values.into(), sq }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub text: String,
    /// Microseconds since the Unix epoch; strictly increasing within a store.
    pub accepted_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgetRecord {
    pub id: String,
    pub text: String,
    pub embedding: EmbeddingVector<f32>,
    pub accepted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreVariant {
    Exact,
    Compressed,
    Clustered,
}

impl StoreVariant {
    pub fn tag(self) -> u8 {
        match self {
            StoreVariant::Exact => 0,
            StoreVariant::Compressed => 1,
            StoreVariant::Clustered => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(StoreVariant::Exact),
            1 => Ok(StoreVariant::Compressed),
            2 => Ok(StoreVariant::Clustered),
            t => Err(Error::Format(format!("unknown store mode tag {t}"))),
        }
    }
}

impl fmt::Display for StoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StoreVariant::Exact => "exact",
            StoreVariant::Compressed => "compressed",
            StoreVariant::Clustered => "clustered",
        })
    }
}

impl std::str::FromStr for StoreVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(StoreVariant::Exact),
            "compressed" => Ok(StoreVariant::Compressed),
            "clustered" => Ok(StoreVariant::Clustered),
            other => Err(Error::Format(format!("unknown store mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreMode {
    pub variant: StoreVariant,
    pub pca_dim: usize,
    pub quant_bits: u8,
    pub keep_ratio: f64,
}

impl Default for StoreMode {
    fn default() -> Self {
        Self::exact()
    }
}

impl StoreMode {
    pub fn exact() -> Self {
        Self { variant: StoreVariant::Exact, pca_dim: 32, quant_bits: 8, keep_ratio: 1.0 }
    }

    pub fn compressed(pca_dim: usize) -> Self {
        Self { variant: StoreVariant::Compressed, pca_dim, quant_bits: 8, keep_ratio: 1.0 }
    }

    pub fn clustered(pca_dim: usize, keep_ratio: f64) -> Self {
        Self { variant: StoreVariant::Clustered, pca_dim, quant_bits: 8, keep_ratio }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.pca_dim == 0 {
            problems.push("pca_dim must be >= 1".to_string());
        }
        if self.quant_bits != 8 {
            problems.push(format!("quant_bits must be 8, got {}", self.quant_bits));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            problems.push(format!("keep_ratio {} outside (0, 1]", self.keep_ratio));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Bytes of an uncompressed float32 store.
pub fn exact_payload_bytes(count: usize, dim: usize) -> u64 {
    (count * dim * 4) as u64
}

/// Bytes of `stored` 8-bit codes of width `k` plus the float32 PCA basis,
/// mean and per-dimension scale/offset.
pub fn compressed_payload_bytes(stored: usize, dim: usize, k: usize) -> u64 {
    (stored * k + (k * dim + dim + 2 * k) * 4) as u64
}

#[derive(Debug)]
pub(crate) struct ReducedIndex {
    pub(crate) mode: StoreMode,
    pub(crate) pca: PcaTransform<f32>,
    pub(crate) block: QuantizedBlock<f32>,
    /// Clustered mode: the record each centroid answers for.
    pub(crate) representatives: Option<Vec<usize>>,
    /// Records covered by `block`; later records live in the delta rows.
    pub(crate) base_count: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Index {
    Exact(AppendLog<Row>),
    Reduced { index: Arc<ReducedIndex>, delta: AppendLog<Row> },
}

/// Result of a max-similarity retrieval. `score` is `None` only for an empty
/// store (or a query that projects to zero in reduced modes).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieval {
    pub score: Option<f64>,
    pub record: Option<usize>,
    pub id: Option<String>,
}

impl Retrieval {
    pub fn none() -> Self {
        Self { score: None, record: None, id: None }
    }
}

#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    pub(crate) dim: Option<usize>,
    pub(crate) records: AppendLog<Arc<RecordMeta>>,
    pub(crate) index: Index,
}

impl StoreSnapshot {
    pub fn empty(dim: Option<usize>) -> Self {
        Self { dim, records: AppendLog::new(), index: Index::Exact(AppendLog::new()) }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.len() == 0
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn mode(&self) -> StoreMode {
        match &self.index {
            Index::Exact(_) => StoreMode::exact(),
            Index::Reduced { index, .. } => index.mode,
        }
    }

    pub fn record(&self, i: usize) -> Option<&RecordMeta> {
        self.records.get(i).map(|r| r.as_ref())
    }

    pub fn records(&self) -> impl Iterator<Item = &RecordMeta> + '_ {
        self.records.iter().map(|r| r.as_ref())
    }

    /// Stored unit embedding of record `i` (exact mode only).
    pub fn embedding(&self, i: usize) -> Option<&[f32]> {
        match &self.index {
            Index::Exact(rows) => rows.get(i).map(|r| &r.values[..]),
            Index::Reduced { .. } => None,
        }
    }

    pub(crate) fn exact_rows(&self) -> Option<&AppendLog<Row>> {
        match &self.index {
            Index::Exact(rows) => Some(rows),
            Index::Reduced { .. } => None,
        }
    }

    /// Number of vectors retrieval scans.
    pub fn stored_vectors(&self) -> usize {
        match &self.index {
            Index::Exact(rows) => rows.len(),
            Index::Reduced { index, delta } => index.block.rows() + delta.len(),
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        match &self.index {
            Index::Exact(rows) => exact_payload_bytes(rows.len(), self.dim.unwrap_or(0)),
            Index::Reduced { index, delta } => {
                let k = index.pca.k();
                compressed_payload_bytes(index.block.rows(), index.pca.dim(), k) + (delta.len() * k * 4) as u64
            }
        }
    }

    /// Highest cosine similarity between `query` and any stored vector.
    /// Ties resolve to the earliest record.
    pub fn max_similarity<T: Scalar>(&self, query: &EmbeddingVector<T>) -> Result<Retrieval> {
        if let Some(dim) = self.dim {
            check_dims(dim, query.dim())?;
        }
        if self.is_empty() {
            return Ok(Retrieval::none());
        }
        // stored rows are unit f32; round the query the same way
        let q = unit_f32(query.as_slice()).ok_or(Error::ZeroNormVector)?;
        let mut best: Option<(f64, usize)> = None;
        let mut consider = |s: f64, record: usize| {
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, record));
            }
        };
        match &self.index {
            Index::Exact(rows) => {
                let qs = sq_norm(&q);
                for (i, row) in rows.iter().enumerate() {
                    consider(similarity_from_parts(dot(&q, &row.values), qs, row.sq), i);
                }
            }
            Index::Reduced { index, delta } => {
                let z = index.pca.project_f32(&q);
                let zs = sq_norm(&z);
                if zs == 0.0 {
                    return Ok(Retrieval::none());
                }
                let mut buf = vec![0.0f64; index.pca.k()];
                for i in 0..index.block.rows() {
                    index.block.dequantize_row_into(i, &mut buf);
                    let rs = sq_norm(&buf);
                    if rs == 0.0 {
                        continue;
                    }
                    let record = index.representatives.as_ref().map_or(i, |r| r[i]);
                    consider(similarity_from_parts(dot(&z, &buf), zs, rs), record);
                }
                for (j, row) in delta.iter().enumerate() {
                    if row.sq == 0.0 {
                        continue;
                    }
                    consider(similarity_from_parts(dot(&z, &row.values), zs, row.sq), index.base_count + j);
                }
            }
        }
        Ok(match best {
            Some((score, record)) => Retrieval {
                score: Some(score),
                record: Some(record),
                id: self.record(record).map(|r| r.id.clone()),
            },
            None => Retrieval::none(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionReport {
    pub mode: StoreMode,
    pub count: usize,
    pub dim: usize,
    pub k: usize,
    pub stored_vectors: usize,
    pub exact_bytes: u64,
    pub compressed_bytes: u64,
    pub ratio: f64,
}

#[derive(Debug)]
struct WriterState {
    ids: HashSet<String>,
    next_seq: u64,
    last_ts: u64,
}

/// Thread-safe forget store with single-writer, snapshot-reader semantics.
#[derive(Debug)]
pub struct ForgetStore {
    current: RwLock<Arc<StoreSnapshot>>,
    writer: Mutex<WriterState>,
    capacity: Option<usize>,
}

impl Default for ForgetStore {
    fn default() -> Self {
        Self::new()
    }
}

fn now_micros() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

impl ForgetStore {
    pub fn new() -> Self {
        Self::from_snapshot(StoreSnapshot::empty(None), None)
    }

    pub fn with_capacity(capacity: Option<usize>) -> Self {
        Self::from_snapshot(StoreSnapshot::empty(None), capacity)
    }

    pub fn from_snapshot(snapshot: StoreSnapshot, capacity: Option<usize>) -> Self {
        let ids: HashSet<String> = snapshot.records().map(|r| r.id.clone()).collect();
        let last_ts = snapshot.records().map(|r| r.accepted_at).max().unwrap_or(0);
        let next_seq = snapshot.len() as u64;
        Self {
            current: RwLock::new(Arc::new(snapshot)),
            writer: Mutex::new(WriterState { ids, next_seq, last_ts }),
            capacity,
        }
    }

    pub fn snapshot(&self) -> Arc<StoreSnapshot> {
        self.current.read().expect("store lock poisoned").clone()
    }

    fn publish(&self, snapshot: StoreSnapshot) {
        *self.current.write().expect("store lock poisoned") = Arc::new(snapshot);
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> Option<usize> {
        self.snapshot().dim()
    }

    pub fn mode(&self) -> StoreMode {
        self.snapshot().mode()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Append a forget record. The embedding is re-normalized before storage;
    /// the first add fixes the store dimension.
    pub fn add<T: Scalar>(&self, text: &str, embedding: &EmbeddingVector<T>) -> Result<ForgetRecord> {
        let mut w = self.writer.lock().expect("writer lock poisoned");
        let snap = self.snapshot();
        if let Some(dim) = snap.dim {
            check_dims(dim, embedding.dim())?;
        }
        if let Some(cap) = self.capacity {
            if snap.len() >= cap {
                return Err(Error::StoreFull(cap));
            }
        }
        let unit = unit_f32(embedding.as_slice()).ok_or(Error::ZeroNormVector)?;

        let mut id = format!("f{:08}", w.next_seq);
        while w.ids.contains(&id) {
            w.next_seq += 1;
            id = format!("f{:08}", w.next_seq);
        }
        w.next_seq += 1;
        let accepted_at = now_micros().max(w.last_ts + 1);
        w.last_ts = accepted_at;

        let meta = Arc::new(RecordMeta { id: id.clone(), text: text.to_string(), accepted_at });
        let index = match &snap.index {
            Index::Exact(rows) => Index::Exact(rows.pushed(Row::new(unit.clone()))),
            Index::Reduced { index, delta } => {
                let z = index.pca.project_f32(&unit);
                Index::Reduced { index: index.clone(), delta: delta.pushed(Row::new(z)) }
            }
        };
        self.publish(StoreSnapshot {
            dim: Some(embedding.dim()),
            records: snap.records.pushed(meta),
            index,
        });
        w.ids.insert(id.clone());
        Ok(ForgetRecord {
            id,
            text: text.to_string(),
            embedding: EmbeddingVector::new(unit)?,
            accepted_at,
        })
    }

    pub fn max_similarity<T: Scalar>(&self, query: &EmbeddingVector<T>) -> Result<Retrieval> {
        self.snapshot().max_similarity(query)
    }

    /// Convert an exact store to a PCA + 8-bit representation (optionally
    /// reduced to k-means centroids). The heavy work runs on a snapshot;
    /// records added meanwhile are projected into the delta rows when the
    /// new representation is published.
    pub fn compress(&self, mode: StoreMode, seed: u64) -> Result<CompressionReport> {
        mode.validate()?;
        let base = self.snapshot();
        let rows = base
            .exact_rows()
            .ok_or_else(|| Error::InsufficientData("store is already compressed".into()))?
            .clone();
        let n = base.len();
        let dim = base.dim.unwrap_or(0);
        if mode.variant == StoreVariant::Exact {
            return Ok(self.report(&base, mode));
        }
        if n < 2 {
            return Err(Error::InsufficientData(format!("compression needs at least 2 records, got {n}")));
        }
        if mode.pca_dim > dim {
            return Err(Error::InsufficientData(format!("pca_dim {} exceeds dimension {dim}", mode.pca_dim)));
        }

        let data: Vec<&[f32]> = rows.iter().map(|r| &r.values[..]).collect();
        let data = Matrix::from_rows(&data)?.cast::<f64>();
        let pca = fit_pca_rows(&data, mode.pca_dim)?.cast::<f32>();
        let projected: Vec<Vec<f64>> = data.row_iter().map(|r| pca.project(r)).collect();
        let projected = Matrix::from_rows(&projected)?;

        let (block_input, representatives) = match mode.variant {
            StoreVariant::Compressed => (projected, None),
            StoreVariant::Clustered => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let coreset = coreset_rows(&projected, mode.keep_ratio, &mut rng)?;
                let reps = representatives(&projected, &coreset.centroids, &coreset.assignments);
                (coreset.centroids, Some(reps))
            }
            StoreVariant::Exact => unreachable!(),
        };
        let block = quantize_8bit(&block_input.cast::<f32>())?;
        let index = Arc::new(ReducedIndex { mode, pca, block, representatives, base_count: n });

        let _w = self.writer.lock().expect("writer lock poisoned");
        let latest = self.snapshot();
        let Some(latest_rows) = latest.exact_rows() else {
            return Err(Error::InsufficientData("store was compressed concurrently".into()));
        };
        let mut delta = AppendLog::new();
        for row in latest_rows.iter().skip(n) {
            delta = delta.pushed(Row::new(index.pca.project_f32(&row.values)));
        }
        let snapshot = StoreSnapshot {
            dim: latest.dim,
            records: latest.records.clone(),
            index: Index::Reduced { index, delta },
        };
        let report = self.report(&snapshot, mode);
        self.publish(snapshot);
        tracing::info!(mode = %mode.variant, ratio = report.ratio, "store compressed");
        Ok(report)
    }

    fn report(&self, snap: &StoreSnapshot, mode: StoreMode) -> CompressionReport {
        let dim = snap.dim.unwrap_or(0);
        let exact_bytes = exact_payload_bytes(snap.len(), dim);
        let compressed_bytes = snap.payload_bytes();
        CompressionReport {
            mode,
            count: snap.len(),
            dim,
            k: if mode.variant == StoreVariant::Exact { dim } else { mode.pca_dim },
            stored_vectors: snap.stored_vectors(),
            exact_bytes,
            compressed_bytes,
            ratio: if compressed_bytes == 0 { 0.0 } else { exact_bytes as f64 / compressed_bytes as f64 },
        }
    }
}

/// For each centroid, the member record most similar to it (or the globally
/// most similar record for an empty cluster).
fn representatives(points: &Matrix<f64>, centroids: &Matrix<f64>, assignments: &[usize]) -> Vec<usize> {
    let norms: Vec<f64> = points.row_iter().map(norm).collect();
    (0..centroids.rows())
        .map(|c| {
            let centroid = centroids.row(c);
            let score = |i: usize| if norms[i] == 0.0 { f64::NEG_INFINITY } else { dot(points.row(i), centroid) / norms[i] };
            let members = (0..points.rows()).filter(|&i| assignments[i] == c);
            let pick = |it: &mut dyn Iterator<Item = usize>| {
                it.fold(None, |best: Option<(f64, usize)>, i| {
                    let s = score(i);
                    if best.is_none_or(|(b, _)| s > b) { Some((s, i)) } else { best }
                })
            };
            pick(&mut members.into_iter())
                .or_else(|| pick(&mut (0..points.rows())))
                .map(|(_, i)| i)
                .unwrap_or(0)
        })
        .collect()
}
