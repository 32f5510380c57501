//! Duplication statistics over a record stream.
//!
//! Within each window, records are grouped by session and visited in stream
//! order. A sample is an exact duplicate when an earlier sample of the same
//! session carries an identical list, so a session of `n` never-changing
//! samples contributes `n - 1` duplicates. An ID occurrence is a partial
//! duplicate when an earlier same-session sample holds that ID; with repeated
//! IDs, the `k`-th copy needs some earlier sample holding at least `k` copies.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::datagen::ImpressionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// The whole record source.
    Partition,
    /// Consecutive chunks of this many records.
    Batch(usize),
}

fn windows(records: &[ImpressionRecord], window: Window) -> std::slice::Chunks<'_, ImpressionRecord> {
    let size = match window {
        Window::Partition => records.len().max(1),
        Window::Batch(b) => b.max(1),
    };
    records.chunks(size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHistogram {
    /// samples-per-session -> number of (window, session) pairs
    pub counts: BTreeMap<usize, usize>,
    pub sessions: usize,
    pub records: usize,
    pub mean: f64,
}

pub fn session_histogram(records: &[ImpressionRecord], window: Window) -> SessionHistogram {
    let mut counts = BTreeMap::new();
    let mut sessions = 0;
    for chunk in windows(records, window) {
        let mut per_session: HashMap<u64, usize> = HashMap::new();
        for r in chunk {
            *per_session.entry(r.session_id).or_default() += 1;
        }
        sessions += per_session.len();
        for n in per_session.into_values() {
            *counts.entry(n).or_default() += 1;
        }
    }
    SessionHistogram {
        counts,
        sessions,
        records: records.len(),
        mean: if sessions == 0 { 0.0 } else { records.len() as f64 / sessions as f64 },
    }
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Percent of samples whose `key` list repeats an earlier same-session sample
/// in the same window.
pub fn exact_dup_pct(records: &[ImpressionRecord], key: &str, window: Window) -> f64 {
    let mut duplicates = 0;
    for chunk in windows(records, window) {
        let mut seen: HashSet<(u64, &[u64])> = HashSet::new();
        for r in chunk {
            if !seen.insert((r.session_id, r.feature(key))) {
                duplicates += 1;
            }
        }
    }
    pct(duplicates, records.len())
}

/// Percent of ID occurrences of `key` already present in an earlier
/// same-session sample of the same window.
pub fn partial_dup_pct(records: &[ImpressionRecord], key: &str, window: Window) -> f64 {
    let (mut matched, mut total) = (0usize, 0usize);
    for chunk in windows(records, window) {
        // per session: ID -> largest multiplicity seen in one earlier sample
        let mut earlier: HashMap<u64, HashMap<u64, usize>> = HashMap::new();
        for r in chunk {
            let list = r.feature(key);
            total += list.len();
            let mut counts: HashMap<u64, usize> = HashMap::new();
            for &id in list {
                *counts.entry(id).or_default() += 1;
            }
            let history = earlier.entry(r.session_id).or_default();
            for (id, c) in counts {
                let prev = history.entry(id).or_default();
                matched += c.min(*prev);
                *prev = (*prev).max(c);
            }
        }
    }
    pct(matched, total)
}

/// Mean list length of `key` over all records.
pub fn avg_len(records: &[ImpressionRecord], key: &str) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.feature(key).len()).sum::<usize>() as f64 / records.len() as f64
}

/// Fraction of adjacent same-session sample pairs (in stream order) whose
/// `key` list is unchanged; `None` without any such pair.
pub fn adjacent_unchanged_rate(records: &[ImpressionRecord], key: &str) -> Option<f64> {
    let mut last: HashMap<u64, &[u64]> = HashMap::new();
    let (mut same, mut pairs) = (0usize, 0usize);
    for r in records {
        if let Some(prev) = last.insert(r.session_id, r.feature(key)) {
            pairs += 1;
            same += usize::from(prev == r.feature(key));
        }
    }
    (pairs > 0).then(|| same as f64 / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDupStats {
    pub feature: String,
    pub exact_pct: f64,
    pub partial_pct: f64,
    pub avg_len: f64,
}

pub fn feature_stats(records: &[ImpressionRecord], key: &str, window: Window) -> FeatureDupStats {
    FeatureDupStats {
        feature: key.to_owned(),
        exact_pct: exact_dup_pct(records, key, window),
        partial_pct: partial_dup_pct(records, key, window),
        avg_len: avg_len(records, key),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByteWeighted {
    pub exact_pct: f64,
    pub partial_pct: f64,
}

/// Weights each feature's percentages by its average length.
pub fn weight_by_length(stats: &[FeatureDupStats]) -> ByteWeighted {
    let total: f64 = stats.iter().map(|s| s.avg_len).sum();
    if total == 0.0 {
        return ByteWeighted {
            exact_pct: 0.0,
            partial_pct: 0.0,
        };
    }
    ByteWeighted {
        exact_pct: stats.iter().map(|s| s.exact_pct * s.avg_len).sum::<f64>() / total,
        partial_pct: stats.iter().map(|s| s.partial_pct * s.avg_len).sum::<f64>() / total,
    }
}

pub fn byte_weighted<S: AsRef<str>>(records: &[ImpressionRecord], keys: &[S], window: Window) -> ByteWeighted {
    let stats: Vec<FeatureDupStats> = keys
        .iter()
        .map(|k| feature_stats(records, k.as_ref(), window))
        .collect();
    weight_by_length(&stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DupStats {
    pub features: Vec<FeatureDupStats>,
    /// Absent when no keys were requested.
    pub byte_weighted: Option<ByteWeighted>,
    pub partition_histogram: SessionHistogram,
    pub batch_histogram: Option<SessionHistogram>,
}

/// Full report: per-feature stats over the whole partition, byte-weighted
/// totals, and session histograms.
pub fn characterize<S: AsRef<str>>(
    records: &[ImpressionRecord],
    keys: &[S],
    batch_size: Option<usize>,
) -> DupStats {
    let features: Vec<FeatureDupStats> = keys
        .iter()
        .map(|k| feature_stats(records, k.as_ref(), Window::Partition))
        .collect();
    DupStats {
        byte_weighted: (!features.is_empty()).then(|| weight_by_length(&features)),
        features,
        partition_histogram: session_histogram(records, Window::Partition),
        batch_histogram: batch_size.map(|b| session_histogram(records, Window::Batch(b))),
    }
}

pub fn write_csv<W: Write>(stats: &[FeatureDupStats], sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(source: R) -> csv::Result<Vec<FeatureDupStats>> {
    csv::Reader::from_reader(source).deserialize().collect()
}
