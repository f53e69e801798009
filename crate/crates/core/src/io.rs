//! On-disk formats.
//!
//! Container layout (little-endian throughout):
//!
//! ```text
//! "CUR8" | version u16 | section count u32 |
//!   { tag len u8 | tag bytes | payload len u64 | crc32 u32 | payload }*
//! ```
//!
//! Sections with unknown tags are skipped. Stores live in `STORE`, projection
//! heads in `HEAD`, free-form JSON in `META`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledPair, TrainingDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::store::pca::PcaTransform;
use crate::store::quant::QuantizedBlock;
use crate::store::{AppendLog, Index, RecordMeta, ReducedIndex, Row, StoreMode, StoreSnapshot, StoreVariant};
use crate::Head;

pub const MAGIC: &[u8; 4] = b"CUR8";
pub const CONTAINER_VERSION: u16 = 1;
pub const STORE_VERSION: u16 = 1;
pub const TAG_STORE: &str = "STORE";
pub const TAG_HEAD: &str = "HEAD";
pub const TAG_META: &str = "META";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub tag: String,
    pub payload: Vec<u8>,
}

impl Section {
    pub fn new(tag: impl Into<String>, payload: Vec<u8>) -> Self {
        Self { tag: tag.into(), payload }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        Self(Vec::new())
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for &v in vs {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("{} payload ends early at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format(format!("{} length overflows", self.what)))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

pub fn encode_container(sections: &[Section]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(CONTAINER_VERSION);
    w.u32(sections.len() as u32);
    for s in sections {
        let tag = s.tag.as_bytes();
        assert!(tag.len() <= u8::MAX as usize, "section tag too long");
        w.u8(tag.len() as u8);
        w.bytes(tag);
        w.u64(s.payload.len() as u64);
        w.u32(crc32fast::hash(&s.payload));
        w.bytes(&s.payload);
    }
    w.0
}

/// Parse a container. Missing bytes anywhere surface as [`Error::Checksum`].
pub fn decode_container(bytes: &[u8]) -> Result<Vec<Section>> {
    let truncated = |section: &str| Error::Checksum { section: section.into(), detail: "file is truncated".into() };
    let mut r = Reader::new(bytes, "container");
    if r.take(4).map_err(|_| truncated("header"))? != MAGIC {
        return Err(Error::Format("not a forget-gate container (bad magic)".into()));
    }
    let version = r.u16().map_err(|_| truncated("header"))?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = r.u32().map_err(|_| truncated("header"))?;
    let mut sections = Vec::with_capacity(count.min(64) as usize);
    for i in 0..count {
        let label = format!("#{i}");
        let tag_len = r.u8().map_err(|_| truncated(&label))? as usize;
        let tag = String::from_utf8(r.take(tag_len).map_err(|_| truncated(&label))?.to_vec())
            .map_err(|_| Error::Format(format!("section {label} has a non-UTF-8 tag")))?;
        let len = r.len().map_err(|_| truncated(&tag))?;
        let crc = r.u32().map_err(|_| truncated(&tag))?;
        let payload = r.take(len).map_err(|_| truncated(&tag))?;
        let actual = crc32fast::hash(payload);
        if actual != crc {
            return Err(Error::Checksum {
                section: tag,
                detail: format!("crc32 {actual:08x} != stored {crc:08x}"),
            });
        }
        sections.push(Section { tag, payload: payload.to_vec() });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last section", bytes.len() - r.pos)));
    }
    Ok(sections)
}

/// Write `bytes` to `path` via a temporary file in the same directory and an
/// atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_container(path: &Path, sections: &[Section]) -> Result<()> {
    write_atomic(path, &encode_container(sections))
}

pub fn load_container(path: &Path) -> Result<Vec<Section>> {
    decode_container(&fs::read(path)?)
}

fn find<'a>(sections: &'a [Section], tag: &str) -> Result<&'a Section> {
    sections
        .iter()
        .find(|s| s.tag == tag)
        .ok_or_else(|| Error::Format(format!("container has no {tag} section")))
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    ids: Vec<String>,
    texts: Vec<String>,
    accepted_at: Vec<u64>,
}

fn write_rows<'a>(w: &mut Writer, rows: impl Iterator<Item = &'a Row>) {
    for row in rows {
        w.f32s(&row.values);
    }
}

fn read_rows(r: &mut Reader, count: usize, width: usize) -> Result<AppendLog<Row>> {
    let mut log = AppendLog::new();
    for _ in 0..count {
        log = log.pushed(Row::new(r.f32s(width)?));
    }
    Ok(log)
}

pub fn encode_store(snapshot: &StoreSnapshot) -> Vec<u8> {
    let mode = snapshot.mode();
    let dim = snapshot.dim.unwrap_or(0);
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(STORE_VERSION);
    w.u8(mode.variant.tag());
    w.u32(dim as u32);
    match &snapshot.index {
        Index::Exact(rows) => {
            w.u32(dim as u32);
            w.u64(snapshot.len() as u64);
            write_rows(&mut w, rows.iter());
        }
        Index::Reduced { index, delta } => {
            let k = index.pca.k();
            w.u32(k as u32);
            w.u64(snapshot.len() as u64);
            w.f64(mode.keep_ratio);
            w.u8(mode.quant_bits);
            w.f32s(index.pca.mean());
            w.f32s(index.pca.components().as_slice());
            w.f32s(index.pca.explained_variance());
            w.u64(index.block.rows() as u64);
            w.f32s(index.block.scale());
            w.f32s(index.block.offset());
            w.bytes(index.block.codes());
            if let Some(reps) = &index.representatives {
                for &r in reps {
                    w.u64(r as u64);
                }
            }
            w.u64(index.base_count as u64);
            w.u64(delta.len() as u64);
            write_rows(&mut w, delta.iter());
        }
    }
    let trailer = Trailer {
        ids: snapshot.records().map(|r| r.id.clone()).collect(),
        texts: snapshot.records().map(|r| r.text.clone()).collect(),
        accepted_at: snapshot.records().map(|r| r.accepted_at).collect(),
    };
    w.bytes(&serde_json::to_vec(&trailer).expect("trailer serializes"));
    w.0
}

pub fn decode_store(bytes: &[u8]) -> Result<StoreSnapshot> {
    let mut r = Reader::new(bytes, "STORE");
    if r.take(4)? != MAGIC {
        return Err(Error::Format("STORE section has bad magic".into()));
    }
    let version = r.u16()?;
    if version != STORE_VERSION {
        return Err(Error::Format(format!("unsupported store version {version}")));
    }
    let variant = StoreVariant::from_tag(r.u8()?)?;
    let dim = r.u32()? as usize;
    let k = r.u32()? as usize;
    let count = r.len()?;
    let index = match variant {
        StoreVariant::Exact => {
            if k != dim {
                return Err(Error::Format(format!("exact store with k {k} != dim {dim}")));
            }
            Index::Exact(read_rows(&mut r, count, dim)?)
        }
        StoreVariant::Compressed | StoreVariant::Clustered => {
            let keep_ratio = r.f64()?;
            let quant_bits = r.u8()?;
            let mode = StoreMode { variant, pca_dim: k, quant_bits, keep_ratio };
            mode.validate()?;
            let mean = r.f32s(dim)?;
            let components = Matrix::from_vec(k, dim, r.f32s(k * dim)?)?;
            let variance = r.f32s(k)?;
            let pca = PcaTransform::from_parts(mean, components, variance)?;
            let rows = r.len()?;
            let scale = r.f32s(k)?;
            let offset = r.f32s(k)?;
            let codes = r.take(rows.checked_mul(k).ok_or_else(|| Error::Format("size overflow".into()))?)?.to_vec();
            let block = QuantizedBlock::from_parts(rows, k, codes, scale, offset)?;
            let representatives = if variant == StoreVariant::Clustered {
                let reps = (0..rows).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
                if reps.iter().any(|&i| i >= count) {
                    return Err(Error::Format("cluster representative out of range".into()));
                }
                Some(reps)
            } else {
                None
            };
            let base_count = r.len()?;
            let delta_len = r.len()?;
            if base_count + delta_len != count {
                return Err(Error::Format(format!("{base_count} base + {delta_len} delta rows != {count} records")));
            }
            let delta = read_rows(&mut r, delta_len, k)?;
            Index::Reduced { index: Arc::new(ReducedIndex { mode, pca, block, representatives, base_count }), delta }
        }
    };
    let trailer: Trailer = serde_json::from_slice(r.rest())?;
    if trailer.ids.len() != count || trailer.texts.len() != count || trailer.accepted_at.len() != count {
        return Err(Error::Format("record trailer length does not match count".into()));
    }
    let mut records = AppendLog::new();
    for ((id, text), accepted_at) in trailer.ids.into_iter().zip(trailer.texts).zip(trailer.accepted_at) {
        records = records.pushed(Arc::new(RecordMeta { id, text, accepted_at }));
    }
    let dim = (dim > 0).then_some(dim);
    Ok(StoreSnapshot { dim, records, index })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreMeta {
    format: String,
    records: usize,
    mode: StoreVariant,
    written_at_us: u64,
}

pub fn save_store(path: &Path, snapshot: &StoreSnapshot) -> Result<()> {
    let meta = StoreMeta {
        format: "forgetgate-store".into(),
        records: snapshot.len(),
        mode: snapshot.mode().variant,
        written_at_us: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0),
    };
    save_container(
        path,
        &[
            Section::new(TAG_STORE, encode_store(snapshot)),
            Section::new(TAG_META, serde_json::to_vec(&meta)?),
        ],
    )
}

pub fn load_store(path: &Path) -> Result<StoreSnapshot> {
    let sections = load_container(path)?;
    decode_store(&find(&sections, TAG_STORE)?.payload)
}

pub fn encode_head(head: &Head) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(head.out_dim() as u32);
    w.u32(head.in_dim() as u32);
    for &v in head.weight().as_slice() {
        w.f64(v);
    }
    for &v in head.bias() {
        w.f64(v);
    }
    w.0
}

pub fn decode_head(bytes: &[u8]) -> Result<Head> {
    let mut r = Reader::new(bytes, "HEAD");
    let out = r.u32()? as usize;
    let inp = r.u32()? as usize;
    let weight = (0..out * inp).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let bias = (0..out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if !r.rest().is_empty() {
        return Err(Error::Format("HEAD section has trailing bytes".into()));
    }
    Head::new(Matrix::from_vec(out, inp, weight)?, bias)
}

pub fn save_head(path: &Path, head: &Head) -> Result<()> {
    save_container(path, &[Section::new(TAG_HEAD, encode_head(head))])
}

pub fn load_head(path: &Path) -> Result<Head> {
    let sections = load_container(path)?;
    decode_head(&find(&sections, TAG_HEAD)?.payload)
}

/// One JSONL line of a training dataset.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    a: String,
    b: String,
    label: u8,
    #[serde(rename = "type")]
    pair_type: u8,
    seed_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partner_seed_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Abort on the first malformed line.
    Strict,
    /// Skip malformed lines and report them.
    Lenient,
}

#[derive(Debug)]
pub struct DatasetLoad {
    pub dataset: TrainingDataset,
    /// `Error::Parse` for every skipped line (lenient mode only).
    pub skipped: Vec<Error>,
}

fn parse_pair(line: &str, line_no: usize) -> Result<LabeledPair> {
    let parsed: PairLine =
        serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
    let pair = LabeledPair {
        text_a: parsed.a,
        text_b: parsed.b,
        label: parsed.label,
        pair_type: parsed.pair_type,
        seed_id: parsed.seed_id,
        partner_seed_id: parsed.partner_seed_id,
    };
    pair.validate().map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
    Ok(pair)
}

/// Read a JSONL dataset. Blank lines are ignored; line numbers are 1-based.
pub fn read_dataset(reader: impl Read, mode: ParseMode) -> Result<DatasetLoad> {
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_pair(&line, i + 1) {
            Ok(p) => pairs.push(p),
            Err(e) if mode == ParseMode::Lenient => {
                tracing::warn!("skipping dataset line: {e}");
                skipped.push(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DatasetLoad { dataset: TrainingDataset::new(pairs), skipped })
}

pub fn write_dataset(mut writer: impl Write, dataset: &TrainingDataset) -> Result<()> {
    for p in dataset.pairs() {
        let line = PairLine {
            a: p.text_a.clone(),
            b: p.text_b.clone(),
            label: p.label,
            pair_type: p.pair_type,
            seed_id: p.seed_id.clone(),
            partner_seed_id: p.partner_seed_id.clone(),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path, mode: ParseMode) -> Result<DatasetLoad> {
    read_dataset(fs::File::open(path)?, mode)
}

pub fn save_dataset(path: &Path, dataset: &TrainingDataset) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, dataset)?;
    write_atomic(path, &buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Stub,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpstreamKind {
    Mock,
    Http,
}

/// Effective gateway configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceConfig {
    pub listen: String,
    pub threshold: f64,
    pub rng_seed: u64,
    pub embedder: EmbedderKind,
    pub embedder_url: Option<String>,
    pub embedder_dim: usize,
    pub embedder_timeout_ms: u64,
    pub head_path: Option<PathBuf>,
    pub upstream: UpstreamKind,
    pub upstream_url: Option<String>,
    pub upstream_timeout_ms: u64,
    pub max_tokens: u32,
    pub mock_response: String,
    pub refusal_file: Option<PathBuf>,
    pub store_path: Option<PathBuf>,
    pub store_mode: StoreVariant,
    pub pca_dim: usize,
    pub keep_ratio: f64,
    pub store_capacity: Option<usize>,
    pub max_in_flight: usize,
    pub persist_interval_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            threshold: crate::gate::DEFAULT_THRESHOLD,
            rng_seed: 0,
            embedder: EmbedderKind::Stub,
            embedder_url: None,
            embedder_dim: 256,
            embedder_timeout_ms: 10_000,
            head_path: None,
            upstream: UpstreamKind::Mock,
            upstream_url: None,
            upstream_timeout_ms: 30_000,
            max_tokens: 256,
            mock_response: "This is a placeholder answer from the mock upstream.".into(),
            refusal_file: None,
            store_path: None,
            store_mode: StoreVariant::Exact,
            pca_dim: 32,
            keep_ratio: 0.9,
            store_capacity: None,
            max_in_flight: 256,
            persist_interval_ms: 1_000,
        }
    }
}

/// Recognized configuration keys. File keys, `FORGETGATE_<KEY>` environment
/// variables and `--<key>` style overrides all use these names.
pub const CONFIG_KEYS: &[&str] = &[
    "listen",
    "threshold",
    "rng_seed",
    "embedder",
    "embedder_url",
    "embedder_dim",
    "embedder_timeout_ms",
    "head_path",
    "upstream",
    "upstream_url",
    "upstream_timeout_ms",
    "max_tokens",
    "mock_response",
    "refusal_file",
    "store_path",
    "store_mode",
    "pca_dim",
    "keep_ratio",
    "store_capacity",
    "max_in_flight",
    "persist_interval_ms",
];

pub const ENV_PREFIX: &str = "FORGETGATE_";

/// Prefixed variables read by other components (log filter, CLI client URL).
pub const ENV_IGNORED: &[&str] = &["log", "url"];

/// Parse `key = value` lines (`#` starts a comment line).
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `key = value`".into(),
        })?;
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.push((k.trim().to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(value: &str, key: &str, source: &str, errors: &mut Vec<String>) -> Option<T>
where
    T::Err: std::fmt::Display,
{
    match value.parse::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{key} = {value:?} ({source}): {e}"));
            None
        }
    }
}

fn optional(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| v.to_string())
}

fn apply(cfg: &mut ServiceConfig, key: &str, value: &str, source: &str, errors: &mut Vec<String>) {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = parse_field(value, key, source, errors) {
                cfg.$field = v;
            }
        };
    }
    match key {
        "listen" => cfg.listen = value.to_string(),
        "threshold" => set!(threshold),
        "rng_seed" => set!(rng_seed),
        "embedder" => match value {
            "stub" => cfg.embedder = EmbedderKind::Stub,
            "remote" => cfg.embedder = EmbedderKind::Remote,
            other => errors.push(format!("embedder = {other:?} ({source}): expected stub or remote")),
        },
        "embedder_url" => cfg.embedder_url = optional(value),
        "embedder_dim" => set!(embedder_dim),
        "embedder_timeout_ms" => set!(embedder_timeout_ms),
        "head_path" => cfg.head_path = optional(value).map(PathBuf::from),
        "upstream" => match value {
            "mock" => cfg.upstream = UpstreamKind::Mock,
            "http" => cfg.upstream = UpstreamKind::Http,
            other => errors.push(format!("upstream = {other:?} ({source}): expected mock or http")),
        },
        "upstream_url" => cfg.upstream_url = optional(value),
        "upstream_timeout_ms" => set!(upstream_timeout_ms),
        "max_tokens" => set!(max_tokens),
        "mock_response" => cfg.mock_response = value.to_string(),
        "refusal_file" => cfg.refusal_file = optional(value).map(PathBuf::from),
        "store_path" => cfg.store_path = optional(value).map(PathBuf::from),
        "store_mode" => set!(store_mode),
        "pca_dim" => set!(pca_dim),
        "keep_ratio" => set!(keep_ratio),
        "store_capacity" => match optional(value) {
            None => cfg.store_capacity = None,
            Some(v) => {
                if let Some(n) = parse_field(&v, key, source, errors) {
                    cfg.store_capacity = Some(n);
                }
            }
        },
        "max_in_flight" => set!(max_in_flight),
        "persist_interval_ms" => set!(persist_interval_ms),
        other => errors.push(format!("unknown key {other:?} ({source})")),
    }
}

impl ServiceConfig {
    /// Every violated constraint, or an empty list.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..=1.0).contains(&self.threshold) {
            p.push(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.listen.trim().is_empty() {
            p.push("listen address is empty".into());
        }
        if self.embedder_dim == 0 {
            p.push("embedder_dim must be >= 1".into());
        }
        if self.embedder == EmbedderKind::Remote && self.embedder_url.is_none() {
            p.push("embedder = remote requires embedder_url".into());
        }
        if self.upstream == UpstreamKind::Http && self.upstream_url.is_none() {
            p.push("upstream = http requires upstream_url".into());
        }
        if self.embedder_timeout_ms == 0 || self.upstream_timeout_ms == 0 {
            p.push("timeouts must be positive".into());
        }
        if self.pca_dim == 0 {
            p.push("pca_dim must be >= 1".into());
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            p.push(format!("keep_ratio {} outside (0, 1]", self.keep_ratio));
        }
        if self.store_capacity == Some(0) {
            p.push("store_capacity must be >= 1 when set".into());
        }
        if self.max_in_flight == 0 {
            p.push("max_in_flight must be >= 1".into());
        }
        p
    }

    pub fn store_mode(&self) -> StoreMode {
        match self.store_mode {
            StoreVariant::Exact => StoreMode::exact(),
            StoreVariant::Compressed => StoreMode::compressed(self.pca_dim),
            StoreVariant::Clustered => StoreMode::clustered(self.pca_dim, self.keep_ratio),
        }
    }
}

/// Layer defaults, the config file, environment and flags (later wins) and
/// validate the result. A missing file is treated as empty. Environment
/// entries without the `FORGETGATE_` prefix are ignored, as are the client
/// and logging variables in [`ENV_IGNORED`]; other unknown prefixed ones are
/// reported.
pub fn load_config<E, F>(file: Option<&Path>, env: E, flags: F) -> Result<ServiceConfig>
where
    E: IntoIterator<Item = (String, String)>,
    F: IntoIterator<Item = (String, String)>,
{
    let mut layers: Vec<(String, String, String)> = Vec::new();
    if let Some(path) = file {
        match fs::read_to_string(path) {
            Ok(text) => {
                let src = format!("file {}", path.display());
                layers.extend(parse_config_text(&text)?.into_iter().map(|(k, v)| (k, v, src.clone())));
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                tracing::warn!("config file {} not found; using defaults", path.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
        .filter(|(k, _)| !ENV_IGNORED.contains(&k.as_str()))
        .collect();
    env.sort();
    layers.extend(env.into_iter().map(|(k, v)| {
        let src = format!("env {ENV_PREFIX}{}", k.to_ascii_uppercase());
        (k, v, src)
    }));
    layers.extend(flags.into_iter().map(|(k, v)| (k.replace('-', "_"), v, "flag".to_string())));

    let mut cfg = ServiceConfig::default();
    let mut errors = Vec::new();
    // Later layers win, but every layer's value must parse.
    let mut last: BTreeMap<String, usize> = BTreeMap::new();
    for (i, (k, _, _)) in layers.iter().enumerate() {
        last.insert(k.clone(), i);
    }
    for (i, (k, v, src)) in layers.iter().enumerate() {
        let mut scratch = ServiceConfig::default();
        if last.get(k) == Some(&i) {
            apply(&mut cfg, k, v, src, &mut errors);
        } else {
            apply(&mut scratch, k, v, src, &mut errors);
        }
    }
    errors.extend(cfg.problems());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Validation(errors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_unknown_sections() {
        let sections = vec![Section::new("STORE", vec![1, 2, 3]), Section::new("XTRA", vec![9; 10])];
        let bytes = encode_container(&sections);
        assert_eq!(decode_container(&bytes).unwrap(), sections);
        assert_eq!(encode_container(&decode_container(&bytes).unwrap()), bytes);
    }

    #[test]
    fn container_truncation_and_corruption() {
        let bytes = encode_container(&[Section::new("STORE", vec![7; 40]), Section::new("META", b"{}".to_vec())]);
        for cut in 4..bytes.len() {
            let err = decode_container(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checksum { .. }), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(decode_container(&flipped), Err(Error::Checksum { .. })));
        assert!(matches!(decode_container(b"NOPE\x01\x00"), Err(Error::Format(_))));
    }

    #[test]
    fn config_text_parsing() {
        let kv = parse_config_text("# comment\nthreshold = 0.9\n\nlisten = \"0.0.0.0:1\"\n").unwrap();
        assert_eq!(kv, [("threshold".into(), "0.9".into()), ("listen".into(), "0.0.0.0:1".into())]);
        assert!(matches!(parse_config_text("oops"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gate.conf");
        fs::write(&path, "threshold = 0.9\nrng_seed = 5\nmax_tokens = 10\n").unwrap();
        let env = vec![
            ("FORGETGATE_RNG_SEED".to_string(), "6".to_string()),
            ("FORGETGATE_MAX_TOKENS".to_string(), "11".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ];
        let flags = vec![("threshold".to_string(), "0.8".to_string()), ("max-tokens".to_string(), "12".to_string())];
        let cfg = load_config(Some(&path), env, flags).unwrap();
        assert_eq!(cfg.threshold, 0.8);
        assert_eq!(cfg.rng_seed, 6);
        assert_eq!(cfg.max_tokens, 12);
    }

    #[test]
    fn config_defaults_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(Some(&dir.path().join("absent.conf")), vec![], vec![]).unwrap();
        assert_eq!(cfg.threshold, 0.8);
        assert_eq!(cfg, ServiceConfig::default());

        let err = load_config(
            None,
            vec![("FORGETGATE_THRESHOLD".to_string(), "1.5".to_string())],
            vec![("embedder".to_string(), "remote".to_string()), ("bogus".to_string(), "1".to_string())],
        )
        .unwrap_err();
        let Error::Validation(problems) = err else { panic!("{err}") };
        assert_eq!(problems.len(), 3, "{problems:?}");
    }
}
