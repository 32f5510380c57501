use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};

use indexmap::IndexMap;

use super::jagged::{jagged_index_select, JaggedTensor};
use super::TensorError;
use crate::datagen::ImpressionRecord;

/// Keyed jagged tensor: one [`JaggedTensor`] per feature key, each with exactly
/// `batch_size` rows. Keys keep their insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Kjt {
    batch_size: usize,
    entries: IndexMap<String, JaggedTensor>,
}

impl Kjt {
    pub fn empty(batch_size: usize) -> Self {
        Self {
            batch_size,
            entries: IndexMap::new(),
        }
    }

    pub fn new(
        batch_size: usize,
        entries: IndexMap<String, JaggedTensor>,
    ) -> Result<Self, TensorError> {
        let mut kjt = Self::empty(batch_size);
        for (key, jt) in entries {
            kjt.insert(key, jt)?;
        }
        Ok(kjt)
    }

    pub fn insert(&mut self, key: impl Into<String>, jt: JaggedTensor) -> Result<(), TensorError> {
        let key = key.into();
        if jt.num_rows() != self.batch_size {
            return Err(TensorError::RowCountMismatch {
                key,
                expected: self.batch_size,
                actual: jt.num_rows(),
            });
        }
        if self.entries.contains_key(&key) {
            return Err(TensorError::DuplicateKey(key));
        }
        self.entries.insert(key, jt);
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&JaggedTensor> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &JaggedTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn get_mut(&mut self, key: &str) -> Option<&mut JaggedTensor> {
        self.entries.get_mut(key)
    }

    pub fn into_entries(self) -> IndexMap<String, JaggedTensor> {
        self.entries
    }
}

/// Inverse keyed jagged tensor: the unique rows of a feature group plus an
/// `inverse_lookup` slice that maps each batch row to its unique row.
///
/// Every feature of the group is stored with the same `U` unique rows and
/// shares the one lookup, so two batch rows are merged only when every feature
/// in the group agrees on them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ikjt {
    group_keys: Vec<String>,
    inverse_lookup: Vec<usize>,
    per_feature: Vec<JaggedTensor>,
}

impl Ikjt {
    pub fn new(
        group_keys: Vec<String>,
        inverse_lookup: Vec<usize>,
        per_feature: Vec<JaggedTensor>,
    ) -> Result<Self, TensorError> {
        if group_keys.is_empty() {
            return Err(TensorError::EmptyGroup);
        }
        if inverse_lookup.is_empty() {
            return Err(TensorError::EmptyBatch);
        }
        if group_keys.len() != per_feature.len() {
            return Err(TensorError::InvalidInverseLookup(format!(
                "{} keys but {} feature tensors",
                group_keys.len(),
                per_feature.len()
            )));
        }
        let mut seen = HashSet::new();
        for key in &group_keys {
            if !seen.insert(key.as_str()) {
                return Err(TensorError::DuplicateKey(key.clone()));
            }
        }
        let unique = per_feature[0].num_rows();
        for (key, jt) in group_keys.iter().zip(&per_feature) {
            if jt.num_rows() != unique {
                return Err(TensorError::RowCountMismatch {
                    key: key.clone(),
                    expected: unique,
                    actual: jt.num_rows(),
                });
            }
        }
        if unique > inverse_lookup.len() {
            return Err(TensorError::InvalidInverseLookup(format!(
                "{unique} unique rows exceed batch size {}",
                inverse_lookup.len()
            )));
        }
        let mut referenced = vec![false; unique];
        for (position, &index) in inverse_lookup.iter().enumerate() {
            if index >= unique {
                return Err(TensorError::IndexOutOfRange {
                    position,
                    index,
                    rows: unique,
                });
            }
            referenced[index] = true;
        }
        if let Some(orphan) = referenced.iter().position(|r| !r) {
            return Err(TensorError::InvalidInverseLookup(format!(
                "unique row {orphan} is never referenced"
            )));
        }
        Ok(Self {
            group_keys,
            inverse_lookup,
            per_feature,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.inverse_lookup.len()
    }

    pub fn num_unique(&self) -> usize {
        self.per_feature[0].num_rows()
    }

    pub fn group_keys(&self) -> &[String] {
        &self.group_keys
    }

    pub fn inverse_lookup(&self) -> &[usize] {
        &self.inverse_lookup
    }

    pub fn contains(&self, key: &str) -> bool {
        self.group_keys.iter().any(|k| k == key)
    }

    pub fn feature(&self, key: &str) -> Option<&JaggedTensor> {
        self.group_keys
            .iter()
            .position(|k| k == key)
            .map(|i| &self.per_feature[i])
    }

    pub fn features(&self) -> impl Iterator<Item = (&str, &JaggedTensor)> {
        self.group_keys
            .iter()
            .map(String::as_str)
            .zip(&self.per_feature)
    }

    /// Batch-order rows of one feature, expanded through the inverse lookup.
    pub fn expand(&self, key: &str) -> Option<JaggedTensor> {
        self.feature(key).map(|jt| {
            jagged_index_select(jt, &self.inverse_lookup)
                .expect("inverse lookup validated at construction")
        })
    }

    /// Replaces the deduplicated values of `key` with `f` applied element-wise.
    /// Returns `None` when the key is not part of this group.
    pub fn map_feature_values(&self, key: &str, f: impl FnMut(u64) -> u64) -> Option<Self> {
        let index = self.group_keys.iter().position(|k| k == key)?;
        let mut out = self.clone();
        out.per_feature[index] = self.per_feature[index].map_values(f);
        Some(out)
    }

    pub fn to_kjt(&self) -> Kjt {
        ikjt_to_kjt(self)
    }
}

fn row_lists<'a>(rows: &'a [ImpressionRecord], key: &str) -> Vec<&'a [u64]> {
    rows.iter().map(|r| r.feature(key)).collect()
}

fn check_keys<S: AsRef<str>>(keys: &[S]) -> Result<(), TensorError> {
    let mut seen = HashSet::new();
    for key in keys {
        if !seen.insert(key.as_ref()) {
            return Err(TensorError::DuplicateKey(key.as_ref().to_owned()));
        }
    }
    Ok(())
}

/// Converts a batch of records into a [`Kjt`], preserving batch order. A key
/// absent from a record yields an empty row.
pub fn build_kjt<S: AsRef<str>>(rows: &[ImpressionRecord], keys: &[S]) -> Result<Kjt, TensorError> {
    if rows.is_empty() {
        return Err(TensorError::EmptyBatch);
    }
    check_keys(keys)?;
    let mut kjt = Kjt::empty(rows.len());
    for key in keys {
        let key = key.as_ref();
        let jt = JaggedTensor::from_rows(row_lists(rows, key));
        kjt.insert(key, jt)?;
    }
    Ok(kjt)
}

fn content_hash(lists: &[&[u64]]) -> u64 {
    let mut hasher = DefaultHasher::new();
    for list in lists {
        // slices hash their length first, so list boundaries are unambiguous
        list.hash(&mut hasher);
    }
    hasher.finish()
}

/// Deduplicates a feature group of a batch into an [`Ikjt`].
///
/// Rows merge iff every feature of the group has identical lists on them,
/// anywhere in the batch. Unique rows are numbered in first-occurrence order.
pub fn build_ikjt<S: AsRef<str>>(
    rows: &[ImpressionRecord],
    group: &[S],
) -> Result<Ikjt, TensorError> {
    build_ikjt_with_hasher(rows, group, content_hash)
}

pub(crate) fn build_ikjt_with_hasher<S, H>(
    rows: &[ImpressionRecord],
    group: &[S],
    hash: H,
) -> Result<Ikjt, TensorError>
where
    S: AsRef<str>,
    H: Fn(&[&[u64]]) -> u64,
{
    if group.is_empty() {
        return Err(TensorError::EmptyGroup);
    }
    if rows.is_empty() {
        return Err(TensorError::EmptyBatch);
    }
    check_keys(group)?;
    let columns: Vec<Vec<&[u64]>> = group.iter().map(|k| row_lists(rows, k.as_ref())).collect();

    let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
    // batch row that first produced each unique row
    let mut representatives: Vec<usize> = Vec::new();
    let mut inverse_lookup = Vec::with_capacity(rows.len());
    let mut per_feature: Vec<JaggedTensor> = columns
        .iter()
        .map(|_| JaggedTensor::with_capacity(rows.len(), 0))
        .collect();
    let mut lists: Vec<&[u64]> = Vec::with_capacity(columns.len());

    for row in 0..rows.len() {
        // clustered batches repeat the previous row most often
        if row > 0 && columns.iter().all(|c| c[row] == c[row - 1]) {
            inverse_lookup.push(inverse_lookup[row - 1]);
            continue;
        }
        lists.clear();
        lists.extend(columns.iter().map(|c| c[row]));
        let bucket = buckets.entry(hash(&lists)).or_default();
        let found = bucket.iter().copied().find(|&unique| {
            let rep = representatives[unique];
            columns.iter().all(|c| c[rep] == c[row])
        });
        let unique = match found {
            Some(unique) => unique,
            None => {
                let unique = representatives.len();
                representatives.push(row);
                bucket.push(unique);
                for (jt, list) in per_feature.iter_mut().zip(&lists) {
                    jt.push_row(list);
                }
                unique
            }
        };
        inverse_lookup.push(unique);
    }

    Ikjt::new(
        group.iter().map(|k| k.as_ref().to_owned()).collect(),
        inverse_lookup,
        per_feature,
    )
}

/// Expands every feature of an [`Ikjt`] back to batch order.
pub fn ikjt_to_kjt(ikjt: &Ikjt) -> Kjt {
    let mut kjt = Kjt::empty(ikjt.batch_size());
    for key in ikjt.group_keys() {
        let expanded = ikjt.expand(key).expect("key belongs to group");
        kjt.insert(key.clone(), expanded)
            .expect("expanded rows equal batch size");
    }
    kjt
}

/// Ratio of baseline to deduplicated values-slice length, per group feature.
pub fn measured_dedupe_factor(
    ikjt: &Ikjt,
    baseline: &Kjt,
) -> Result<IndexMap<String, f64>, TensorError> {
    let mut out = IndexMap::new();
    for (key, dedup) in ikjt.features() {
        let base = baseline
            .get(key)
            .ok_or_else(|| TensorError::KeyMismatch(key.to_owned()))?;
        if baseline.batch_size() != ikjt.batch_size() {
            return Err(TensorError::RowCountMismatch {
                key: key.to_owned(),
                expected: ikjt.batch_size(),
                actual: baseline.batch_size(),
            });
        }
        let factor = if dedup.values().is_empty() {
            1.0
        } else {
            base.values().len() as f64 / dedup.values().len() as f64
        };
        out.insert(key.to_owned(), factor);
    }
    Ok(out)
}
