//! Batch reader: fill rows from a columnar file, convert them to KJT/IKJT
//! tensors, apply element-wise transforms, and emit the serialized batch.
//!
//! In dedup mode every group of `dedup_sparse_features` becomes one IKJT and
//! transforms touch only its deduplicated values. Transforms are restricted to
//! element-wise ID maps; anything depending on a whole row would need the
//! expanded batch and is not supported.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{splitmix64, ImpressionRecord};
use crate::storage::{ColumnarFile, Scanner, StorageError};
use crate::tensors::wire::{self, WireReader, WireTensor};
use crate::tensors::{build_ikjt, build_kjt, Ikjt, JaggedTensor, Kjt, TensorError};

#[derive(Debug, Error)]
pub enum ReaderError {
    #[error("invalid dataloader spec: {0}")]
    InvalidSpec(String),
    #[error("unknown feature key `{0}`")]
    UnknownKey(String),
    #[error("cannot convert an empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("spec parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read spec: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReaderError> = std::result::Result<T, E>;

/// An element-wise ID function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TransformOp {
    Identity,
    /// Hashes each ID into `[0, buckets)`.
    ModuloHash { buckets: u64 },
    Clamp { min: u64, max: u64 },
}

impl TransformOp {
    pub fn apply(&self, id: u64) -> u64 {
        match *self {
            TransformOp::Identity => id,
            TransformOp::ModuloHash { buckets } => splitmix64(id) % buckets,
            TransformOp::Clamp { min, max } => id.clamp(min, max),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TransformOp::ModuloHash { buckets: 0 } => {
                Err(ReaderError::InvalidSpec("modulo_hash needs buckets >= 1".into()))
            }
            TransformOp::Clamp { min, max } if min > max => {
                Err(ReaderError::InvalidSpec(format!("clamp range {min}..={max} is empty")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub key: String,
    #[serde(flatten)]
    pub op: TransformOp,
}

impl Transform {
    pub fn new(key: &str, op: TransformOp) -> Self {
        Self { key: key.to_owned(), op }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataloaderSpec {
    pub keys: Vec<String>,
    /// Disjoint groups of keys, each deduplicated under one inverse lookup.
    #[serde(default)]
    pub dedup_sparse_features: Vec<Vec<String>>,
    /// Applied in order.
    #[serde(default)]
    pub transforms: Vec<Transform>,
    pub batch_size: usize,
}

impl DataloaderSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ReaderError::InvalidSpec("batch_size must be >= 1".into()));
        }
        let mut keys = HashSet::new();
        for key in &self.keys {
            if !keys.insert(key.as_str()) {
                return Err(ReaderError::InvalidSpec(format!("key `{key}` listed twice")));
            }
        }
        let mut grouped = HashSet::new();
        for group in &self.dedup_sparse_features {
            if group.is_empty() {
                return Err(ReaderError::InvalidSpec("empty dedup group".into()));
            }
            for key in group {
                if !keys.contains(key.as_str()) {
                    return Err(ReaderError::UnknownKey(key.clone()));
                }
                if !grouped.insert(key.as_str()) {
                    return Err(ReaderError::InvalidSpec(format!(
                        "key `{key}` is in more than one dedup group"
                    )));
                }
            }
        }
        for t in &self.transforms {
            if !keys.contains(t.key.as_str()) {
                return Err(ReaderError::UnknownKey(t.key.clone()));
            }
            t.op.validate()?;
        }
        Ok(())
    }

    fn ungrouped_keys(&self) -> Vec<&str> {
        let grouped: HashSet<&str> = self
            .dedup_sparse_features
            .iter()
            .flatten()
            .map(String::as_str)
            .collect();
        self.keys
            .iter()
            .map(String::as_str)
            .filter(|k| !grouped.contains(k))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Every key becomes a plain KJT entry; dedup groups are ignored.
    Baseline,
    Dedup,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub fill: Duration,
    pub convert: Duration,
    pub process: Duration,
    pub emit: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.fill + self.convert + self.process + self.emit
    }

    pub fn accumulate(&mut self, other: &StageTimings) {
        self.fill += other.fill;
        self.convert += other.convert;
        self.process += other.process;
        self.emit += other.emit;
    }
}

/// Rows gathered by [`fill`]. Empty once the stream is exhausted.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBatch {
    pub records: Vec<ImpressionRecord>,
    /// Compressed file bytes consumed for this batch.
    pub bytes_in: u64,
    pub elapsed: Duration,
}

impl RawBatch {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A feature as held by a [`ReaderBatch`].
#[derive(Debug, Clone, Copy)]
pub enum FeatureRef<'a> {
    Plain(&'a JaggedTensor),
    Dedup(&'a Ikjt),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderBatch {
    /// Features outside any dedup group (all features in baseline mode).
    pub kjt: Kjt,
    /// One per dedup group, in spec order.
    pub ikjts: Vec<Ikjt>,
    pub labels: Vec<u8>,
    pub timings: StageTimings,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl ReaderBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn feature(&self, key: &str) -> Option<FeatureRef<'_>> {
        if let Some(jt) = self.kjt.get(key) {
            return Some(FeatureRef::Plain(jt));
        }
        self.ikjts
            .iter()
            .find(|ikjt| ikjt.contains(key))
            .map(FeatureRef::Dedup)
    }

    /// Number of ID elements stored (and so processed) for `key`.
    pub fn stored_elements(&self, key: &str) -> Option<usize> {
        Some(match self.feature(key)? {
            FeatureRef::Plain(jt) => jt.values().len(),
            FeatureRef::Dedup(ikjt) => ikjt.feature(key)?.values().len(),
        })
    }

    /// The batch with every IKJT expanded, keys in `keys` order.
    pub fn to_logical<S: AsRef<str>>(&self, keys: &[S]) -> Result<Kjt> {
        let mut out = Kjt::empty(self.batch_size());
        for key in keys {
            let key = key.as_ref();
            let jt = match self.feature(key).ok_or_else(|| ReaderError::UnknownKey(key.to_owned()))? {
                FeatureRef::Plain(jt) => jt.clone(),
                FeatureRef::Dedup(ikjt) => ikjt.expand(key).expect("key found in group"),
            };
            out.insert(key, jt)?;
        }
        Ok(out)
    }
}

/// Pulls the next batch of rows from `scanner`; an exhausted stream yields an
/// empty batch.
pub fn fill(scanner: &mut Scanner<'_>) -> Result<RawBatch> {
    let start = Instant::now();
    let (records, bytes_in) = match scanner.next() {
        Some(batch) => {
            let batch = batch?;
            (batch.records, batch.bytes_read)
        }
        None => (Vec::new(), 0),
    };
    Ok(RawBatch {
        records,
        bytes_in,
        elapsed: start.elapsed(),
    })
}

/// Builds tensors for `rows`. A spec key absent from every row is unknown.
pub fn convert(rows: &[ImpressionRecord], spec: &DataloaderSpec, mode: PipelineMode) -> Result<ReaderBatch> {
    let start = Instant::now();
    if rows.is_empty() {
        return Err(ReaderError::EmptyBatch);
    }
    for key in &spec.keys {
        if !rows.iter().any(|r| r.features.contains_key(key)) {
            return Err(ReaderError::UnknownKey(key.clone()));
        }
    }
    let (kjt, ikjts) = match mode {
        PipelineMode::Baseline => (build_kjt(rows, &spec.keys)?, Vec::new()),
        PipelineMode::Dedup => (
            build_kjt(rows, &spec.ungrouped_keys())?,
            spec.dedup_sparse_features
                .iter()
                .map(|group| build_ikjt(rows, group))
                .collect::<Result<_, _>>()?,
        ),
    };
    Ok(ReaderBatch {
        kjt,
        ikjts,
        labels: rows.iter().map(|r| r.label).collect(),
        timings: StageTimings {
            convert: start.elapsed(),
            ..StageTimings::default()
        },
        bytes_in: 0,
        bytes_out: 0,
    })
}

/// Applies `transforms` in order. IKJT features are transformed on their
/// deduplicated values and stay deduplicated.
pub fn process(mut batch: ReaderBatch, transforms: &[Transform]) -> Result<ReaderBatch> {
    let start = Instant::now();
    for t in transforms {
        let op = t.op;
        if let Some(jt) = batch.kjt.get_mut(&t.key) {
            *jt = jt.map_values(|id| op.apply(id));
            continue;
        }
        let ikjt = batch
            .ikjts
            .iter_mut()
            .find(|ikjt| ikjt.contains(&t.key))
            .ok_or_else(|| ReaderError::UnknownKey(t.key.clone()))?;
        *ikjt = ikjt
            .map_feature_values(&t.key, |id| op.apply(id))
            .expect("key found in group");
    }
    batch.timings.process += start.elapsed();
    Ok(batch)
}

/// Serializes `batch` and records its size in `bytes_out`.
///
/// ```text
/// batch := tensor_count:u32 kjt ikjt* labels_len:u64 label:u8*
/// ```
pub fn emit(batch: &mut ReaderBatch) -> Vec<u8> {
    let start = Instant::now();
    let mut out = Vec::with_capacity(emitted_len(batch));
    wire::put_u32(&mut out, 1 + batch.ikjts.len() as u32);
    wire::encode_kjt(&batch.kjt, &mut out);
    for ikjt in &batch.ikjts {
        wire::encode_ikjt(ikjt, &mut out);
    }
    wire::put_u64(&mut out, batch.labels.len() as u64);
    out.extend_from_slice(&batch.labels);
    batch.bytes_out = out.len() as u64;
    batch.timings.emit += start.elapsed();
    out
}

/// Serialized size of `batch` without encoding it.
pub fn emitted_len(batch: &ReaderBatch) -> usize {
    4 + wire::kjt_wire_len(&batch.kjt)
        + batch.ikjts.iter().map(wire::ikjt_wire_len).sum::<usize>()
        + 8
        + batch.labels.len()
}

/// Tensors and labels recovered from [`emit`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBatch {
    pub kjt: Kjt,
    pub ikjts: Vec<Ikjt>,
    pub labels: Vec<u8>,
}

pub fn decode_batch(buf: &[u8]) -> Result<DecodedBatch> {
    let mut r = WireReader::new(buf);
    let count = r.u32()?;
    if count == 0 {
        return Err(TensorError::Decode("batch without a KJT".into()).into());
    }
    let kjt = match wire::read_tensor(&mut r)? {
        WireTensor::Kjt(kjt) => kjt,
        WireTensor::Ikjt(_) => return Err(TensorError::Decode("batch must start with a KJT".into()).into()),
    };
    let mut ikjts = Vec::new();
    for _ in 1..count {
        match wire::read_tensor(&mut r)? {
            WireTensor::Ikjt(ikjt) => ikjts.push(ikjt),
            WireTensor::Kjt(_) => return Err(TensorError::Decode("second KJT in batch".into()).into()),
        }
    }
    let len = r.u64()? as usize;
    let labels = r.bytes(len)?.to_vec();
    if r.position() != buf.len() {
        return Err(TensorError::Decode(format!("{} trailing bytes", buf.len() - r.position())).into());
    }
    Ok(DecodedBatch { kjt, ikjts, labels })
}

/// Runs the full pipeline for one batch of rows.
pub fn read_rows(rows: &[ImpressionRecord], spec: &DataloaderSpec, mode: PipelineMode) -> Result<(ReaderBatch, Vec<u8>)> {
    let batch = convert(rows, spec, mode)?;
    let mut batch = process(batch, &spec.transforms)?;
    let bytes = emit(&mut batch);
    Ok((batch, bytes))
}

/// Iterates a columnar file batch by batch through fill, convert, process and
/// emit. Each item carries the batch and its serialized form.
pub struct Reader<'a> {
    scanner: Scanner<'a>,
    spec: &'a DataloaderSpec,
    mode: PipelineMode,
    done: bool,
}

impl<'a> Reader<'a> {
    pub fn new(file: &'a ColumnarFile, spec: &'a DataloaderSpec, mode: PipelineMode) -> Result<Self> {
        spec.validate()?;
        if let Some(missing) = spec.keys.iter().find(|k| !file.keys().contains(k)) {
            return Err(ReaderError::UnknownKey(missing.clone()));
        }
        Ok(Self {
            scanner: file.scan(spec.batch_size),
            spec,
            mode,
            done: false,
        })
    }

    fn step(&mut self) -> Result<Option<(ReaderBatch, Vec<u8>)>> {
        let raw = fill(&mut self.scanner)?;
        if raw.is_empty() {
            return Ok(None);
        }
        let start = Instant::now();
        let mut batch = convert(&raw.records, self.spec, self.mode)?;
        // releasing the rows is part of conversion
        drop(raw.records);
        batch.timings.convert = start.elapsed();
        let mut batch = process(batch, &self.spec.transforms)?;
        batch.timings.fill = raw.elapsed;
        batch.bytes_in = raw.bytes_in;
        let bytes = emit(&mut batch);
        Ok(Some((batch, bytes)))
    }
}

impl Iterator for Reader<'_> {
    type Item = Result<(ReaderBatch, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.step().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}
