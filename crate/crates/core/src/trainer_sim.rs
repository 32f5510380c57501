//! In-process simulation of one training iteration's sparse forward path
//! across `R` ranks.
//!
//! Per iteration every rank holds one local batch. Feature slices are routed
//! to the rank owning their embedding table (SDD), looked up, pooled, sent
//! back, expanded to batch rows, and combined by a fixed pairwise-dot
//! interaction and an affine+sigmoid head. Network volume is the serialized
//! size of routed slices; no real transfer happens.
//!
//! In dedup mode a pooling group whose keys all sit in one IKJT is routed,
//! looked up and pooled on unique rows only; its inverse lookup never leaves
//! the sending rank, which expands the returned pooled vectors. Every
//! reduction runs left to right over a logical row's elements, so both modes
//! produce bit-identical scores.

use std::borrow::Cow;
use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reader::{PipelineMode, ReaderBatch};
use crate::tensors::wire::{slice_wire_len, values_payload_len};
use crate::tensors::{jagged_index_select, Ikjt, JaggedTensor, Kjt, TensorError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("unknown feature key `{0}`")]
    UnknownKey(String),
    #[error("id {id} at position {position} of `{key}` is outside a table of {rows} rows")]
    IdOutOfRange {
        key: String,
        position: usize,
        id: u64,
        rows: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("rank batches disagree: {0}")]
    BatchMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model spec parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read model spec: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainerError> = std::result::Result<T, E>;

/// Bytes needed to hold the embedding activations of `batch_size` rows of
/// `avg_len` IDs each.
pub fn activation_bytes(batch_size: u64, avg_len: u64, dim: u64, elem_bytes: u64) -> u64 {
    batch_size * avg_len * dim * elem_bytes
}

const F32_BYTES: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    weights: Vec<f32>,
}

impl EmbeddingTable {
    /// Weights drawn uniformly from `[-1/sqrt(dim), 1/sqrt(dim))`.
    pub fn seeded(rows: usize, dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..rows * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { rows, dim, weights }
    }

    /// Row-major `rows x dim` weights.
    pub fn from_weights(rows: usize, dim: usize, weights: Vec<f32>) -> Result<Self> {
        if dim == 0 || weights.len() != rows * dim {
            return Err(TrainerError::DimMismatch {
                expected: rows * dim.max(1),
                actual: weights.len(),
            });
        }
        Ok(Self { rows, dim, weights })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.weights[id * self.dim..(id + 1) * self.dim]
    }
}

/// One embedding vector per looked-up element, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Activations {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Gathers one table row per element of `values`; the lookup count is
/// `values.len()`.
pub fn embedding_lookup(key: &str, values: &[u64], table: &EmbeddingTable) -> Result<Activations> {
    let mut data = Vec::with_capacity(values.len() * table.dim);
    for (position, &id) in values.iter().enumerate() {
        if id >= table.rows as u64 {
            return Err(TrainerError::IdOutOfRange {
                key: key.to_owned(),
                position,
                id,
                rows: table.rows,
            });
        }
        data.extend_from_slice(table.row(id as usize));
    }
    Ok(Activations { dim: table.dim, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolOp {
    Sum,
    Avg,
    Max,
}

/// Pooling applied to a group's concatenated per-row sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Sum,
    Avg,
    Max,
    Attention,
}

/// `(start, end)` element range of each row; offsets hold one start per row.
fn row_bounds(offsets: &[usize], total: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    offsets
        .iter()
        .enumerate()
        .map(move |(row, &start)| (start, offsets.get(row + 1).copied().unwrap_or(total)))
}

/// Reduces each row's vectors to one; empty rows give zero vectors. Returns
/// `rows x dim` outputs and the multiply-accumulate count.
pub fn pool(acts: &Activations, offsets: &[usize], op: PoolOp) -> (Vec<f32>, u64) {
    let dim = acts.dim;
    let mut out = vec![0.0f32; offsets.len() * dim];
    let mut macs = 0u64;
    for (row, (start, end)) in row_bounds(offsets, acts.len()).enumerate() {
        let dst = &mut out[row * dim..(row + 1) * dim];
        let n = end - start;
        match op {
            PoolOp::Sum | PoolOp::Avg => {
                for i in start..end {
                    for (d, x) in dst.iter_mut().zip(acts.vector(i)) {
                        *d += x;
                    }
                }
                if op == PoolOp::Avg && n > 0 {
                    for d in dst.iter_mut() {
                        *d /= n as f32;
                    }
                    macs += dim as u64;
                }
            }
            PoolOp::Max => {
                if n > 0 {
                    dst.copy_from_slice(acts.vector(start));
                    for i in start + 1..end {
                        for (d, x) in dst.iter_mut().zip(acts.vector(i)) {
                            *d = d.max(*x);
                        }
                    }
                }
            }
        }
        macs += (n * dim) as u64;
    }
    (out, macs)
}

/// Single-head attention pooling with a learned query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub dim: usize,
    pub query: Vec<f32>,
    /// `dim x dim`, row-major.
    pub key_proj: Vec<f32>,
    pub value_proj: Vec<f32>,
}

impl AttentionParams {
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        Self {
            dim,
            query: draw(dim),
            key_proj: draw(dim * dim),
            value_proj: draw(dim * dim),
        }
    }

    fn project(&self, x: &[f32], proj: &[f32], out: &mut [f32]) {
        out.fill(0.0);
        for (m, xm) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&proj[m * self.dim..(m + 1) * self.dim]) {
                *o += xm * w;
            }
        }
    }
}

/// Multiply-accumulates spent pooling a row of `n` vectors with attention.
pub fn attention_row_macs(n: usize, dim: usize) -> u64 {
    (n * (2 * dim * dim + 2 * dim)) as u64
}

/// Scaled dot-product attention of the fixed query over each row's vectors.
pub fn attention_pool(acts: &Activations, offsets: &[usize], params: &AttentionParams) -> Result<(Vec<f32>, u64)> {
    let dim = params.dim;
    if acts.dim != dim {
        return Err(TrainerError::DimMismatch {
            expected: dim,
            actual: acts.dim,
        });
    }
    let scale = 1.0 / (dim as f32).sqrt();
    let mut out = vec![0.0f32; offsets.len() * dim];
    let mut macs = 0u64;
    let mut k = vec![0.0f32; dim];
    let mut v = vec![0.0f32; dim];
    for (row, (start, end)) in row_bounds(offsets, acts.len()).enumerate() {
        let n = end - start;
        if n == 0 {
            continue;
        }
        let mut scores = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * dim);
        for i in start..end {
            let x = acts.vector(i);
            params.project(x, &params.key_proj, &mut k);
            params.project(x, &params.value_proj, &mut v);
            let mut s = 0.0f32;
            for (q, kj) in params.query.iter().zip(&k) {
                s += q * kj;
            }
            scores.push(s * scale);
            values.extend_from_slice(&v);
        }
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let dst = &mut out[row * dim..(row + 1) * dim];
        for (i, s) in scores.iter().enumerate() {
            let a = s / total;
            for (d, vj) in dst.iter_mut().zip(&values[i * dim..(i + 1) * dim]) {
                *d += a * vj;
            }
        }
        macs += attention_row_macs(n, dim);
    }
    Ok((out, macs))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub key: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingGroup {
    /// Pooled over the row-wise concatenation of these keys, in this order.
    pub keys: Vec<String>,
    pub op: PoolingKind,
}

/// Model description. All tables share `dim`. Tables missing from `pooling`
/// are sum-pooled on their own. Without `sharding`, pooling groups are
/// assigned to ranks round-robin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub num_ranks: usize,
    #[serde(default)]
    pub seed: u64,
    pub tables: Vec<TableSpec>,
    #[serde(default)]
    pub pooling: Vec<PoolingGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharding: Option<IndexMap<String, usize>>,
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec is always representable")
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tables.iter().map(|t| t.key.as_str())
    }

    /// Explicit pooling groups followed by singleton sum groups for the rest.
    pub fn resolved_pooling(&self) -> Result<Vec<PoolingGroup>> {
        let tables: HashSet<&str> = self.keys().collect();
        let mut seen = HashSet::new();
        for g in &self.pooling {
            if g.keys.is_empty() {
                return Err(TrainerError::InvalidSpec("empty pooling group".into()));
            }
            for key in &g.keys {
                if !tables.contains(key.as_str()) {
                    return Err(TrainerError::UnknownKey(key.clone()));
                }
                if !seen.insert(key.as_str()) {
                    return Err(TrainerError::InvalidSpec(format!("`{key}` is in two pooling groups")));
                }
            }
        }
        let mut groups = self.pooling.clone();
        for key in self.keys() {
            if !seen.contains(key) {
                groups.push(PoolingGroup {
                    keys: vec![key.to_owned()],
                    op: PoolingKind::Sum,
                });
            }
        }
        Ok(groups)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardingPlan {
    pub num_ranks: usize,
    /// Owning rank of every table key.
    pub assignment: IndexMap<String, usize>,
}

impl ShardingPlan {
    /// Pooling group `g` goes to rank `g % num_ranks`.
    pub fn round_robin(groups: &[PoolingGroup], num_ranks: usize) -> Result<Self> {
        if num_ranks == 0 {
            return Err(TrainerError::InvalidSpec("num_ranks must be >= 1".into()));
        }
        let assignment = groups
            .iter()
            .enumerate()
            .flat_map(|(g, group)| group.keys.iter().map(move |k| (k.clone(), g % num_ranks)))
            .collect();
        Ok(Self { num_ranks, assignment })
    }

    pub fn rank_of(&self, key: &str) -> Option<usize> {
        self.assignment.get(key).copied()
    }

    fn validate(&self, groups: &[PoolingGroup]) -> Result<()> {
        if self.num_ranks == 0 {
            return Err(TrainerError::InvalidSpec("num_ranks must be >= 1".into()));
        }
        for group in groups {
            let mut ranks = group.keys.iter().map(|k| {
                self.rank_of(k)
                    .ok_or_else(|| TrainerError::InvalidSpec(format!("`{k}` has no rank")))
            });
            let first = ranks.next().expect("groups are non-empty")?;
            if first >= self.num_ranks {
                return Err(TrainerError::InvalidSpec(format!("rank {first} >= {}", self.num_ranks)));
            }
            for rank in ranks {
                if rank? != first {
                    return Err(TrainerError::InvalidSpec(format!(
                        "pooling group {:?} spans ranks",
                        group.keys
                    )));
                }
            }
        }
        if self.assignment.len() != groups.iter().map(|g| g.keys.len()).sum::<usize>() {
            return Err(TrainerError::InvalidSpec("sharding names keys without tables".into()));
        }
        Ok(())
    }
}

/// Fixed head: pooled vectors and their pairwise dots feed an affine map and
/// a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub weights: Vec<f32>,
    pub bias: f32,
}

impl Interaction {
    fn seeded(groups: usize, dim: usize, seed: u64) -> Self {
        let n = groups * dim + groups * groups.saturating_sub(1) / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weights: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            bias: 0.1,
        }
    }

    /// `pooled[g]` is the row's vector for pooling group `g`.
    pub fn score(&self, pooled: &[&[f32]]) -> f32 {
        let mut w = self.weights.iter();
        let mut z = self.bias;
        for p in pooled {
            for x in *p {
                z += w.next().expect("weights sized for groups") * x;
            }
        }
        for i in 0..pooled.len() {
            for j in i + 1..pooled.len() {
                let mut dot = 0.0f32;
                for (a, b) in pooled[i].iter().zip(pooled[j]) {
                    dot += a * b;
                }
                z += w.next().expect("weights sized for groups") * dot;
            }
        }
        1.0 / (1.0 + (-z).exp())
    }
}

/// Materialized model: tables, pooling parameters, sharding, head.
#[derive(Debug, Clone)]
pub struct Model {
    pub dim: usize,
    pub tables: IndexMap<String, EmbeddingTable>,
    pub groups: Vec<PoolingGroup>,
    pub attention: Vec<Option<AttentionParams>>,
    pub plan: ShardingPlan,
    pub interaction: Interaction,
}

impl Model {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        if spec.dim == 0 {
            return Err(TrainerError::InvalidSpec("dim must be >= 1".into()));
        }
        let mut tables = IndexMap::new();
        for (i, t) in spec.tables.iter().enumerate() {
            if t.rows == 0 {
                return Err(TrainerError::InvalidSpec(format!("table `{}` has no rows", t.key)));
            }
            let seed = crate::datagen::splitmix64(spec.seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
            if tables
                .insert(t.key.clone(), EmbeddingTable::seeded(t.rows, spec.dim, seed))
                .is_some()
            {
                return Err(TrainerError::InvalidSpec(format!("table `{}` listed twice", t.key)));
            }
        }
        let groups = spec.resolved_pooling()?;
        let plan = match &spec.sharding {
            Some(assignment) => ShardingPlan {
                num_ranks: spec.num_ranks,
                assignment: assignment.clone(),
            },
            None => ShardingPlan::round_robin(&groups, spec.num_ranks)?,
        };
        plan.validate(&groups)?;
        let attention = groups
            .iter()
            .enumerate()
            .map(|(g, group)| {
                (group.op == PoolingKind::Attention)
                    .then(|| AttentionParams::seeded(spec.dim, spec.seed.wrapping_add(1 + g as u64)))
            })
            .collect();
        Ok(Self {
            dim: spec.dim,
            interaction: Interaction::seeded(groups.len(), spec.dim, spec.seed.wrapping_add(0xfeed)),
            tables,
            groups,
            attention,
            plan,
        })
    }

    /// Builds a model around explicit tables (all of dimension `dim`) with
    /// every pooling group on rank 0.
    pub fn with_tables(
        tables: IndexMap<String, EmbeddingTable>,
        groups: Vec<PoolingGroup>,
        seed: u64,
    ) -> Result<Self> {
        let dim = tables.values().next().map_or(1, EmbeddingTable::dim);
        if let Some(t) = tables.values().find(|t| t.dim != dim) {
            return Err(TrainerError::DimMismatch {
                expected: dim,
                actual: t.dim,
            });
        }
        let plan = ShardingPlan::round_robin(&groups, 1)?;
        plan.validate(&groups)?;
        Ok(Self {
            dim,
            attention: groups
                .iter()
                .enumerate()
                .map(|(g, group)| {
                    (group.op == PoolingKind::Attention)
                        .then(|| AttentionParams::seeded(dim, seed.wrapping_add(1 + g as u64)))
                })
                .collect(),
            interaction: Interaction::seeded(groups.len(), dim, seed.wrapping_add(0xfeed)),
            tables,
            groups,
            plan,
        })
    }

    pub fn num_ranks(&self) -> usize {
        self.plan.num_ranks
    }

    fn group_rank(&self, g: usize) -> usize {
        self.plan.rank_of(&self.groups[g].keys[0]).expect("validated plan")
    }
}

/// A rank's local sparse batch.
#[derive(Debug, Clone, Copy)]
pub struct SparseInput<'a> {
    pub kjt: &'a Kjt,
    pub ikjts: &'a [Ikjt],
}

impl<'a> From<&'a ReaderBatch> for SparseInput<'a> {
    fn from(batch: &'a ReaderBatch) -> Self {
        Self {
            kjt: &batch.kjt,
            ikjts: &batch.ikjts,
        }
    }
}

impl<'a> SparseInput<'a> {
    pub fn new(kjt: &'a Kjt, ikjts: &'a [Ikjt]) -> Self {
        Self { kjt, ikjts }
    }

    pub fn batch_size(&self) -> usize {
        self.ikjts.first().map_or(self.kjt.batch_size(), Ikjt::batch_size)
    }

    fn ikjt_of(&self, key: &str) -> Option<&'a Ikjt> {
        self.ikjts.iter().find(|i| i.contains(key))
    }
}

/// A pooling group's tensors as prepared on the sending rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGroup<'a> {
    /// One tensor per group key, all with the same row count.
    pub tensors: Vec<Cow<'a, JaggedTensor>>,
    /// Present when the tensors hold unique rows; stays on the sender.
    pub inverse_lookup: Option<&'a [usize]>,
}

/// A rank's batch split by pooling group.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBatch<'a> {
    pub batch_size: usize,
    pub groups: Vec<LocalGroup<'a>>,
    /// Elements copied while expanding IKJT features that cannot stay
    /// deduplicated.
    pub index_select_elements: u64,
}

/// Splits one rank's input by pooling group. Baseline mode expands every IKJT
/// feature; dedup mode keeps a group deduplicated iff all its keys share one
/// IKJT.
pub fn prepare_local<'a>(input: SparseInput<'a>, model: &Model, mode: PipelineMode) -> Result<LocalBatch<'a>> {
    let batch_size = input.batch_size();
    let mut index_select_elements = 0u64;
    let mut groups = Vec::with_capacity(model.groups.len());
    for group in &model.groups {
        let shared = match mode {
            PipelineMode::Baseline => None,
            PipelineMode::Dedup => {
                let first = input.ikjt_of(&group.keys[0]);
                first.filter(|ikjt| group.keys.iter().all(|k| ikjt.contains(k)))
            }
        };
        let local = match shared {
            Some(ikjt) => LocalGroup {
                tensors: group
                    .keys
                    .iter()
                    .map(|k| Cow::Borrowed(ikjt.feature(k).expect("checked membership")))
                    .collect(),
                inverse_lookup: Some(ikjt.inverse_lookup()),
            },
            None => {
                let mut tensors = Vec::with_capacity(group.keys.len());
                for key in &group.keys {
                    if let Some(jt) = input.kjt.get(key) {
                        tensors.push(Cow::Borrowed(jt));
                    } else if let Some(ikjt) = input.ikjt_of(key) {
                        let expanded = ikjt.expand(key).expect("checked membership");
                        if mode == PipelineMode::Dedup {
                            index_select_elements += expanded.values().len() as u64;
                        }
                        tensors.push(Cow::Owned(expanded));
                    } else {
                        return Err(TrainerError::UnknownKey(key.clone()));
                    }
                }
                LocalGroup {
                    tensors,
                    inverse_lookup: None,
                }
            }
        };
        for t in &local.tensors {
            let expected = local.inverse_lookup.map_or(batch_size, |_| local.tensors[0].num_rows());
            if t.num_rows() != expected {
                return Err(TrainerError::BatchMismatch(format!(
                    "group {:?} has a tensor of {} rows, expected {expected}",
                    group.keys,
                    t.num_rows()
                )));
            }
        }
        groups.push(local);
    }
    Ok(LocalBatch {
        batch_size,
        groups,
        index_select_elements,
    })
}

/// Slices one rank received for one pooling group.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedGroup<'a> {
    pub group: usize,
    /// `per_sender[s][k]` is sender `s`'s tensor for the group's `k`-th key.
    pub per_sender: Vec<Vec<Cow<'a, JaggedTensor>>>,
}

impl RoutedGroup<'_> {
    /// Concatenation of all senders' rows for the group's `k`-th key.
    pub fn concatenated(&self, k: usize) -> JaggedTensor {
        JaggedTensor::from_rows(self.per_sender.iter().flat_map(|s| s[k].rows()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SddOutput<'a> {
    /// Groups owned by each rank, in pooling-group order.
    pub received: Vec<Vec<RoutedGroup<'a>>>,
    /// Serialized size of every transmitted offsets and values slice,
    /// self-sends included.
    pub a2a_bytes_fwd: u64,
    /// Values-stream payload bytes per key.
    pub values_bytes_fwd: IndexMap<String, u64>,
    /// Offsets and values slice bytes per key.
    pub slice_bytes_fwd: IndexMap<String, u64>,
}

/// Routes every group's slices to its owning rank. Inverse lookups are not
/// sent.
pub fn sdd<'a>(locals: &[LocalBatch<'a>], model: &Model) -> Result<SddOutput<'a>> {
    let ranks = model.num_ranks();
    if locals.len() != ranks {
        return Err(TrainerError::BatchMismatch(format!(
            "{} local batches for {ranks} ranks",
            locals.len()
        )));
    }
    if let Some(b) = locals.iter().map(|l| l.batch_size).find(|&b| b != locals[0].batch_size) {
        return Err(TrainerError::BatchMismatch(format!(
            "batch sizes {} and {b}",
            locals[0].batch_size
        )));
    }
    let mut received: Vec<Vec<RoutedGroup<'a>>> = (0..ranks).map(|_| Vec::new()).collect();
    let mut a2a_bytes_fwd = 0u64;
    let mut values_bytes_fwd: IndexMap<String, u64> = IndexMap::new();
    let mut slice_bytes_fwd: IndexMap<String, u64> = IndexMap::new();
    for (g, group) in model.groups.iter().enumerate() {
        let mut per_sender = Vec::with_capacity(ranks);
        for local in locals {
            let tensors = &local.groups[g].tensors;
            for (key, jt) in group.keys.iter().zip(tensors) {
                let bytes = slice_wire_len(jt) as u64;
                a2a_bytes_fwd += bytes;
                *slice_bytes_fwd.entry(key.clone()).or_default() += bytes;
                *values_bytes_fwd.entry(key.clone()).or_default() += values_payload_len(jt) as u64;
            }
            per_sender.push(tensors.clone());
        }
        received[model.group_rank(g)].push(RoutedGroup { group: g, per_sender });
    }
    Ok(SddOutput {
        received,
        a2a_bytes_fwd,
        values_bytes_fwd,
        slice_bytes_fwd,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationStats {
    pub a2a_bytes_fwd: u64,
    /// Pooled vectors returned to their senders, 4 bytes per element.
    pub a2a_bytes_back: u64,
    pub lookup_count: u64,
    /// Embedding activations materialized before pooling.
    pub activation_elements: u64,
    pub pooling_mac_count: u64,
    /// Elements copied by inverse-lookup expansion; zero in baseline mode.
    pub index_select_elements: u64,
    pub values_bytes_fwd: IndexMap<String, u64>,
}

impl IterationStats {
    pub fn merge(&mut self, other: &IterationStats) {
        self.a2a_bytes_fwd += other.a2a_bytes_fwd;
        self.a2a_bytes_back += other.a2a_bytes_back;
        self.lookup_count += other.lookup_count;
        self.activation_elements += other.activation_elements;
        self.pooling_mac_count += other.pooling_mac_count;
        self.index_select_elements += other.index_select_elements;
        for (k, v) in &other.values_bytes_fwd {
            *self.values_bytes_fwd.entry(k.clone()).or_default() += v;
        }
    }

    /// Counters that deduplication must never increase.
    pub fn dominance_counters(&self) -> [(&'static str, u64); 5] {
        [
            ("a2a_bytes_fwd", self.a2a_bytes_fwd),
            ("a2a_bytes_back", self.a2a_bytes_back),
            ("lookup_count", self.lookup_count),
            ("activation_elements", self.activation_elements),
            ("pooling_mac_count", self.pooling_mac_count),
        ]
    }

    /// Names of counters where `self` exceeds `baseline`.
    pub fn dominance_violations(&self, baseline: &IterationStats) -> Vec<&'static str> {
        self.dominance_counters()
            .iter()
            .zip(baseline.dominance_counters())
            .filter(|((_, mine), (_, theirs))| mine > theirs)
            .map(|((name, _), _)| *name)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    /// One score per row of each rank's batch.
    pub scores: Vec<Vec<f32>>,
    pub stats: IterationStats,
}

struct PooledBlock {
    /// `rows x dim` for one sender.
    values: Vec<f32>,
    rows: usize,
}

#[derive(Default)]
struct RankCounters {
    lookups: u64,
    activations: u64,
    macs: u64,
}

fn pool_group(
    model: &Model,
    g: usize,
    tensors: &[Cow<'_, JaggedTensor>],
    counters: &mut RankCounters,
) -> Result<PooledBlock> {
    let group = &model.groups[g];
    let rows = tensors[0].num_rows();
    let mut per_key = Vec::with_capacity(tensors.len());
    for (key, jt) in group.keys.iter().zip(tensors) {
        let acts = embedding_lookup(key, jt.values(), &model.tables[key.as_str()])?;
        counters.lookups += jt.values().len() as u64;
        counters.activations += acts.data.len() as u64;
        per_key.push(acts);
    }
    // row-wise concatenation of the group's keys
    let (acts, offsets) = if per_key.len() == 1 {
        (per_key.pop().expect("one key"), tensors[0].offsets().to_vec())
    } else {
        let dim = model.dim;
        let mut data = Vec::with_capacity(per_key.iter().map(|a| a.data.len()).sum());
        let mut offsets = Vec::with_capacity(rows);
        let bounds: Vec<Vec<(usize, usize)>> = tensors
            .iter()
            .map(|jt| row_bounds(jt.offsets(), jt.values().len()).collect())
            .collect();
        for row in 0..rows {
            offsets.push(data.len() / dim);
            for (acts, b) in per_key.iter().zip(&bounds) {
                let (start, end) = b[row];
                data.extend_from_slice(&acts.data[start * dim..end * dim]);
            }
        }
        (Activations { dim, data }, offsets)
    };
    let (values, macs) = match group.op {
        PoolingKind::Sum => pool(&acts, &offsets, PoolOp::Sum),
        PoolingKind::Avg => pool(&acts, &offsets, PoolOp::Avg),
        PoolingKind::Max => pool(&acts, &offsets, PoolOp::Max),
        PoolingKind::Attention => {
            attention_pool(&acts, &offsets, model.attention[g].as_ref().expect("attention params"))?
        }
    };
    counters.macs += macs;
    Ok(PooledBlock { values, rows })
}

/// Runs one iteration over one local batch per rank.
pub fn forward_iteration(inputs: &[SparseInput<'_>], model: &Model, mode: PipelineMode) -> Result<IterationOutput> {
    let locals: Vec<LocalBatch<'_>> = inputs
        .iter()
        .map(|input| prepare_local(*input, model, mode))
        .collect::<Result<_>>()?;
    let routed = sdd(&locals, model)?;
    let dim = model.dim;
    let groups = model.groups.len();

    // each owning rank pools what it received, independently
    let per_rank: Vec<(Vec<(usize, Vec<PooledBlock>)>, RankCounters)> = routed
        .received
        .par_iter()
        .map(|owned| {
            let mut counters = RankCounters::default();
            let mut out = Vec::with_capacity(owned.len());
            for rg in owned {
                let blocks = rg
                    .per_sender
                    .iter()
                    .map(|tensors| pool_group(model, rg.group, tensors, &mut counters))
                    .collect::<Result<Vec<_>>>()?;
                out.push((rg.group, blocks));
            }
            Ok((out, counters))
        })
        .collect::<Result<_>>()?;

    let mut stats = IterationStats {
        a2a_bytes_fwd: routed.a2a_bytes_fwd,
        values_bytes_fwd: routed.values_bytes_fwd,
        index_select_elements: locals.iter().map(|l| l.index_select_elements).sum(),
        ..IterationStats::default()
    };
    // pooled[g][sender]
    let mut pooled: Vec<Vec<PooledBlock>> = (0..groups).map(|_| Vec::new()).collect();
    for (owned, counters) in per_rank {
        stats.lookup_count += counters.lookups;
        stats.activation_elements += counters.activations;
        stats.pooling_mac_count += counters.macs;
        for (g, blocks) in owned {
            stats.a2a_bytes_back += blocks.iter().map(|b| (b.rows * dim) as u64 * F32_BYTES).sum::<u64>();
            pooled[g] = blocks;
        }
    }

    // senders expand returned vectors and score their rows
    let per_sender: Vec<(Vec<f32>, u64)> = locals
        .par_iter()
        .enumerate()
        .map(|(s, local)| {
            let mut selected = 0u64;
            let expanded: Vec<Cow<'_, [f32]>> = (0..groups)
                .map(|g| {
                    let block = &pooled[g][s];
                    match local.groups[g].inverse_lookup {
                        None => Ok(Cow::Borrowed(block.values.as_slice())),
                        // an identity lookup needs no expansion
                        Some(inverse) if inverse.iter().enumerate().all(|(i, &u)| i == u) => {
                            Ok(Cow::Borrowed(block.values.as_slice()))
                        }
                        Some(inverse) => {
                            let offsets = (0..block.rows).map(|r| r * dim).collect();
                            let jt = JaggedTensor::new(block.values.clone(), offsets)?;
                            let out = jagged_index_select(&jt, inverse)?;
                            selected += out.values().len() as u64;
                            Ok(Cow::Owned(out.into_parts().0))
                        }
                    }
                })
                .collect::<Result<_>>()?;
            let mut row_vectors: Vec<&[f32]> = Vec::with_capacity(groups);
            let scores = (0..local.batch_size)
                .map(|row| {
                    row_vectors.clear();
                    row_vectors.extend(expanded.iter().map(|e| &e[row * dim..(row + 1) * dim]));
                    model.interaction.score(&row_vectors)
                })
                .collect();
            Ok((scores, selected))
        })
        .collect::<Result<_>>()?;

    let mut scores = Vec::with_capacity(per_sender.len());
    for (s, selected) in per_sender {
        stats.index_select_elements += selected;
        scores.push(s);
    }
    Ok(IterationOutput { scores, stats })
}

/// Index of the first score differing in bit pattern, as `(rank, row)`.
pub fn first_score_mismatch(a: &[Vec<f32>], b: &[Vec<f32>]) -> Option<(usize, usize)> {
    if a.len() != b.len() {
        return Some((a.len().min(b.len()), 0));
    }
    for (rank, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Some((rank, x.len().min(y.len())));
        }
        if let Some(row) = x.iter().zip(y).position(|(p, q)| p.to_bits() != q.to_bits()) {
            return Some((rank, row));
        }
    }
    None
}
