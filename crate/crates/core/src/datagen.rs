//! Synthetic session-centric impression logs.
//!
//! Every session draws a number of impressions and a time window. User
//! sequence features start as a random list and, on each later impression,
//! either stay put or shift by one (drop the oldest ID, append a new one).
//! Item features are redrawn on every impression. Records from all sessions
//! are then ordered by a global timestamp, which interleaves sessions the way
//! inference logs naturally do.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("failed to parse generator config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to read generator config: {0}")]
    Io(#[from] std::io::Error),
}

/// One logged training sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpressionRecord {
    pub session_id: u64,
    /// Strictly increasing within a session.
    pub timestamp: u64,
    pub features: BTreeMap<String, Vec<u64>>,
    pub label: u8,
}

impl ImpressionRecord {
    /// The ID list for `key`; empty when the record does not carry it.
    pub fn feature(&self, key: &str) -> &[u64] {
        self.features.get(key).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    UserSequence,
    Item,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub key: String,
    pub kind: FeatureKind,
    pub avg_len: f64,
    /// Per-impression probability that the list changes.
    pub change_prob: f64,
    pub vocab_size: u64,
    /// Features sharing a sync group change on the same impressions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_group: Option<String>,
}

impl FeatureSpec {
    pub fn user_sequence(key: &str, avg_len: f64, change_prob: f64, vocab_size: u64) -> Self {
        Self {
            key: key.to_owned(),
            kind: FeatureKind::UserSequence,
            avg_len,
            change_prob,
            vocab_size,
            sync_group: None,
        }
    }

    pub fn item(key: &str, avg_len: f64, vocab_size: u64) -> Self {
        Self {
            key: key.to_owned(),
            kind: FeatureKind::Item,
            avg_len,
            change_prob: 1.0,
            vocab_size,
            sync_group: None,
        }
    }

    pub fn in_sync_group(mut self, group: &str) -> Self {
        self.sync_group = Some(group.to_owned());
        self
    }

    /// Probability the list is unchanged between adjacent impressions.
    pub fn unchanged_prob(&self) -> f64 {
        match self.kind {
            FeatureKind::UserSequence => 1.0 - self.change_prob,
            FeatureKind::Item => 0.0,
        }
    }

    fn validate(&self) -> Result<(), DatagenError> {
        let bad = |msg: &str| Err(DatagenError::InvalidConfig(format!("feature {:?}: {msg}", self.key)));
        if self.key.is_empty() {
            return bad("empty key");
        }
        if !(self.avg_len > 0.0) || !self.avg_len.is_finite() {
            return bad("avg_len must be > 0");
        }
        if self.kind == FeatureKind::UserSequence && self.avg_len < 1.0 {
            return bad("user_sequence features need avg_len >= 1");
        }
        if !(0.0..=1.0).contains(&self.change_prob) {
            return bad("change_prob must be in [0, 1]");
        }
        if self.vocab_size < 1 {
            return bad("vocab_size must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplesPerSession {
    Fixed { count: usize },
    /// Support `{1, 2, ...}` with the given mean.
    Geometric { mean: f64 },
    /// `(samples, weight)` pairs.
    Empirical { histogram: Vec<(usize, f64)> },
}

impl SamplesPerSession {
    pub fn mean(&self) -> f64 {
        match self {
            Self::Fixed { count } => *count as f64,
            Self::Geometric { mean } => *mean,
            Self::Empirical { histogram } => {
                let total: f64 = histogram.iter().map(|(_, w)| w).sum();
                histogram.iter().map(|&(n, w)| n as f64 * w).sum::<f64>() / total
            }
        }
    }

    fn validate(&self) -> Result<(), DatagenError> {
        let ok = match self {
            Self::Fixed { count } => *count >= 1,
            Self::Geometric { mean } => *mean >= 1.0 && mean.is_finite(),
            Self::Empirical { histogram } => {
                !histogram.is_empty()
                    && histogram.iter().all(|&(n, w)| n >= 1 && w >= 0.0 && w.is_finite())
                    && histogram.iter().any(|&(_, w)| w > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DatagenError::InvalidConfig(format!(
                "samples_per_session {self:?} must have mean >= 1"
            )))
        }
    }

    fn sampler(&self) -> SessionSizeSampler {
        match self {
            Self::Fixed { count } => SessionSizeSampler::Fixed(*count),
            Self::Geometric { mean } => {
                SessionSizeSampler::Geometric(Geometric::new(1.0 / mean).expect("mean >= 1"))
            }
            Self::Empirical { histogram } => SessionSizeSampler::Empirical(
                histogram.iter().map(|&(n, _)| n).collect(),
                WeightedIndex::new(histogram.iter().map(|&(_, w)| w)).expect("validated weights"),
            ),
        }
    }
}

enum SessionSizeSampler {
    Fixed(usize),
    Geometric(Geometric),
    Empirical(Vec<usize>, WeightedIndex<f64>),
}

impl SessionSizeSampler {
    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            Self::Fixed(n) => *n,
            Self::Geometric(g) => 1 + g.sample(rng) as usize,
            Self::Empirical(sizes, index) => sizes[index.sample(rng)],
        }
    }
}

fn default_span() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub num_sessions: usize,
    pub samples_per_session: SamplesPerSession,
    pub seed: u64,
    /// Length of a session's time window as a fraction of the partition.
    #[serde(default = "default_span")]
    pub session_span: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub session: SessionConfig,
    pub features: Vec<FeatureSpec>,
}

/// Partition length in timestamp ticks.
const PARTITION_TICKS: u64 = 1 << 40;
const LABEL_RATE: f64 = 0.1;

impl GeneratorConfig {
    /// A high-duplication config: ~10^5 impressions, 16 samples per session on
    /// average, user features unchanged with probability 0.85.
    pub fn default_high_dup() -> Self {
        Self {
            session: SessionConfig {
                num_sessions: 6250,
                samples_per_session: SamplesPerSession::Geometric { mean: 16.0 },
                seed: 42,
                session_span: 1.0,
            },
            features: vec![
                FeatureSpec::user_sequence("user_liked_items", 20.0, 0.15, 100_000),
                FeatureSpec::user_sequence("user_shared_items", 10.0, 0.15, 100_000),
                FeatureSpec::user_sequence("cart_item_ids", 8.0, 0.15, 100_000).in_sync_group("cart"),
                FeatureSpec::user_sequence("cart_seller_ids", 8.0, 0.15, 20_000).in_sync_group("cart"),
                FeatureSpec::item("item_id", 1.0, 100_000),
                FeatureSpec::item("item_category", 2.0, 1_000),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, DatagenError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatagenError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.session.seed = seed;
        self
    }

    pub fn feature_keys(&self) -> Vec<String> {
        self.features.iter().map(|f| f.key.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.session.num_sessions == 0 {
            return Err(DatagenError::InvalidConfig("num_sessions must be >= 1".into()));
        }
        if !(self.session.session_span > 0.0 && self.session.session_span <= 1.0) {
            return Err(DatagenError::InvalidConfig("session_span must be in (0, 1]".into()));
        }
        self.session.samples_per_session.validate()?;
        let mut keys = std::collections::HashSet::new();
        let mut groups: HashMap<&str, f64> = HashMap::new();
        for f in &self.features {
            f.validate()?;
            if !keys.insert(f.key.as_str()) {
                return Err(DatagenError::InvalidConfig(format!("duplicate feature {:?}", f.key)));
            }
            if let Some(group) = &f.sync_group {
                if f.kind != FeatureKind::UserSequence {
                    return Err(DatagenError::InvalidConfig(format!(
                        "feature {:?}: only user_sequence features can be synchronized",
                        f.key
                    )));
                }
                let prob = *groups.entry(group).or_insert(f.change_prob);
                if prob != f.change_prob {
                    return Err(DatagenError::InvalidConfig(format!(
                        "sync group {group:?} mixes change probabilities"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Bijective 64-bit mixer.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn draw_len<R: Rng>(avg_len: f64, rng: &mut R) -> usize {
    let base = avg_len.floor();
    base as usize + usize::from(rng.gen_bool(avg_len - base))
}

fn draw_list<R: Rng>(len: usize, vocab: u64, rng: &mut R) -> Vec<u64> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn generate_session(cfg: &GeneratorConfig, index: u64, sizes: &SessionSizeSampler) -> Vec<ImpressionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.session.seed);
    rng.set_stream(index);

    let session_id = splitmix64(cfg.session.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ index);
    let count = sizes.sample(&mut rng);
    let window = ((PARTITION_TICKS as f64 * cfg.session.session_span) as u64).max(count as u64 + 1);
    let start = rng.gen_range(0..PARTITION_TICKS - window + 1);
    let mut offsets: Vec<u64> = (0..count).map(|_| rng.gen_range(0..window - count as u64)).collect();
    offsets.sort_unstable();

    let mut state: Vec<Vec<u64>> = cfg
        .features
        .iter()
        .map(|f| match f.kind {
            FeatureKind::UserSequence => {
                let len = draw_len(f.avg_len, &mut rng);
                draw_list(len, f.vocab_size, &mut rng)
            }
            FeatureKind::Item => Vec::new(),
        })
        .collect();

    let mut records = Vec::with_capacity(count);
    for (i, offset) in offsets.into_iter().enumerate() {
        if i > 0 {
            let mut group_flips: HashMap<&str, bool> = HashMap::new();
            for (f, list) in cfg.features.iter().zip(state.iter_mut()) {
                if f.kind != FeatureKind::UserSequence {
                    continue;
                }
                let changed = match &f.sync_group {
                    Some(g) => *group_flips
                        .entry(g.as_str())
                        .or_insert_with(|| rng.gen_bool(f.change_prob)),
                    None => rng.gen_bool(f.change_prob),
                };
                if changed {
                    list.remove(0);
                    list.push(rng.gen_range(0..f.vocab_size));
                }
            }
        }
        for (f, list) in cfg.features.iter().zip(state.iter_mut()) {
            if f.kind == FeatureKind::Item {
                let len = draw_len(f.avg_len, &mut rng);
                *list = draw_list(len, f.vocab_size, &mut rng);
            }
        }
        records.push(ImpressionRecord {
            session_id,
            timestamp: start + offset + i as u64,
            features: cfg
                .features
                .iter()
                .zip(&state)
                .map(|(f, l)| (f.key.clone(), l.clone()))
                .collect(),
            label: u8::from(rng.gen_bool(LABEL_RATE)),
        });
    }
    records
}

/// Generates the full interleaved impression log for `cfg`. Identical configs
/// (including the seed) produce identical logs.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<ImpressionRecord>, DatagenError> {
    cfg.validate()?;
    let sizes = cfg.session.samples_per_session.sampler();
    let mut records: Vec<ImpressionRecord> = (0..cfg.session.num_sessions as u64)
        .flat_map(|s| generate_session(cfg, s, &sizes))
        .collect();
    records.sort_by_key(|r| (r.timestamp, r.session_id));
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardKey {
    SessionId,
    RandomHash,
}

/// Routes records to `num_shards` shards, preserving arrival order per shard.
///
/// With [`ShardKey::SessionId`] a session never spans shards; with
/// [`ShardKey::RandomHash`] each record is routed independently.
pub fn shard_logs(
    records: &[ImpressionRecord],
    num_shards: usize,
    key: ShardKey,
) -> Result<Vec<Vec<ImpressionRecord>>, DatagenError> {
    if num_shards == 0 {
        return Err(DatagenError::InvalidConfig("num_shards must be >= 1".into()));
    }
    let mut shards = vec![Vec::new(); num_shards];
    for (i, r) in records.iter().enumerate() {
        let h = match key {
            ShardKey::SessionId => splitmix64(r.session_id),
            ShardKey::RandomHash => splitmix64(splitmix64(r.session_id ^ r.timestamp) ^ i as u64),
        };
        shards[(h % num_shards as u64) as usize].push(r.clone());
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(samples: SamplesPerSession, sessions: usize, features: Vec<FeatureSpec>) -> GeneratorConfig {
        GeneratorConfig {
            session: SessionConfig {
                num_sessions: sessions,
                samples_per_session: samples,
                seed: 9,
                session_span: 1.0,
            },
            features,
        }
    }

    fn by_session(records: &[ImpressionRecord]) -> BTreeMap<u64, Vec<&ImpressionRecord>> {
        let mut map: BTreeMap<u64, Vec<&ImpressionRecord>> = BTreeMap::new();
        for r in records {
            map.entry(r.session_id).or_default().push(r);
        }
        map
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = GeneratorConfig::default_high_dup();
        let mut cfg = cfg.clone();
        cfg.session.num_sessions = 50;
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&cfg.clone().with_seed(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn never_changing_feature_is_constant_per_session() {
        let cfg = small(
            SamplesPerSession::Fixed { count: 5 },
            40,
            vec![FeatureSpec::user_sequence("u", 4.0, 0.0, 1000)],
        );
        let records = generate_dataset(&cfg).unwrap();
        assert_eq!(records.len(), 200);
        for rows in by_session(&records).values() {
            assert!(rows.iter().all(|r| r.feature("u") == rows[0].feature("u")));
            assert!(rows.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        }
    }

    #[test]
    fn unchanged_rate_tracks_config() {
        let cfg = small(
            SamplesPerSession::Fixed { count: 3 },
            20_000,
            vec![FeatureSpec::user_sequence("b", 3.0, 0.5, 1_000_000)],
        );
        let records = generate_dataset(&cfg).unwrap();
        let (mut same, mut pairs) = (0usize, 0usize);
        for rows in by_session(&records).values() {
            for w in rows.windows(2) {
                pairs += 1;
                same += usize::from(w[0].feature("b") == w[1].feature("b"));
            }
        }
        let rate = same as f64 / pairs as f64;
        // 40k Bernoulli(0.5) pairs: sd ~0.0025
        assert!((rate - 0.5).abs() < 0.015, "rate {rate}");
    }

    #[test]
    fn changes_are_shift_by_one() {
        let cfg = small(
            SamplesPerSession::Fixed { count: 6 },
            30,
            vec![FeatureSpec::user_sequence("u", 5.0, 0.7, 1 << 40)],
        );
        let records = generate_dataset(&cfg).unwrap();
        for rows in by_session(&records).values() {
            for w in rows.windows(2) {
                let (a, b) = (w[0].feature("u"), w[1].feature("u"));
                assert_eq!(a.len(), b.len());
                assert!(a == b || a[1..] == b[..b.len() - 1]);
            }
        }
    }

    #[test]
    fn geometric_mean_is_respected() {
        let cfg = small(SamplesPerSession::Geometric { mean: 16.5 }, 20_000, vec![]);
        let records = generate_dataset(&cfg).unwrap();
        let sessions = by_session(&records).len();
        let mean = records.len() as f64 / sessions as f64;
        assert!((mean - 16.5).abs() / 16.5 < 0.02, "mean {mean}");
    }

    #[test]
    fn empirical_histogram_sizes() {
        let cfg = small(
            SamplesPerSession::Empirical { histogram: vec![(1, 1.0), (3, 1.0)] },
            500,
            vec![],
        );
        let records = generate_dataset(&cfg).unwrap();
        let sizes: HashSet<usize> = by_session(&records).values().map(Vec::len).collect();
        assert!(sizes.is_subset(&HashSet::from([1, 3])));
        assert_eq!(sizes.len(), 2);
    }

    #[test]
    fn sync_group_changes_together() {
        let cfg = small(
            SamplesPerSession::Fixed { count: 8 },
            100,
            vec![
                FeatureSpec::user_sequence("x", 3.0, 0.5, 1 << 40).in_sync_group("g"),
                FeatureSpec::user_sequence("y", 2.0, 0.5, 1 << 40).in_sync_group("g"),
            ],
        );
        let records = generate_dataset(&cfg).unwrap();
        for rows in by_session(&records).values() {
            for w in rows.windows(2) {
                assert_eq!(
                    w[0].feature("x") == w[1].feature("x"),
                    w[0].feature("y") == w[1].feature("y")
                );
            }
        }
    }

    #[test]
    fn item_features_rarely_repeat() {
        let cfg = small(
            SamplesPerSession::Fixed { count: 10 },
            200,
            vec![FeatureSpec::item("item", 1.0, 1_000_000)],
        );
        let records = generate_dataset(&cfg).unwrap();
        let (mut same, mut pairs) = (0, 0);
        for rows in by_session(&records).values() {
            for w in rows.windows(2) {
                pairs += 1;
                same += usize::from(w[0].feature("item") == w[1].feature("item"));
            }
        }
        assert!((same as f64) < 0.01 * pairs as f64);
    }

    #[test]
    fn ids_stay_in_vocab_and_labels_binary() {
        let mut cfg = GeneratorConfig::default_high_dup();
        cfg.session.num_sessions = 100;
        let records = generate_dataset(&cfg).unwrap();
        for r in &records {
            assert!(r.label <= 1);
            for f in &cfg.features {
                assert!(r.feature(&f.key).iter().all(|&id| id < f.vocab_size));
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = GeneratorConfig::default_high_dup();
        cfg.features[0].change_prob = 1.5;
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = GeneratorConfig::default_high_dup();
        cfg.session.samples_per_session = SamplesPerSession::Geometric { mean: 0.5 };
        assert!(cfg.validate().is_err());
        let mut cfg = GeneratorConfig::default_high_dup();
        cfg.features[3].change_prob = 0.3;
        assert!(cfg.validate().is_err(), "sync group with mixed probabilities");
        assert!(GeneratorConfig::from_toml("session = 3").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = GeneratorConfig::default_high_dup();
        let back = GeneratorConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sharding_modes() {
        let mut cfg = GeneratorConfig::default_high_dup();
        cfg.session.num_sessions = 200;
        let records = generate_dataset(&cfg).unwrap();

        let one_a = shard_logs(&records, 1, ShardKey::SessionId).unwrap();
        let one_b = shard_logs(&records, 1, ShardKey::RandomHash).unwrap();
        assert_eq!(one_a, one_b);
        assert_eq!(one_a[0], records);

        let shards = shard_logs(&records, 8, ShardKey::SessionId).unwrap();
        let mut owner: HashMap<u64, usize> = HashMap::new();
        for (i, shard) in shards.iter().enumerate() {
            for r in shard {
                assert_eq!(*owner.entry(r.session_id).or_insert(i), i, "session spans shards");
            }
        }
        let hashed = shard_logs(&records, 8, ShardKey::RandomHash).unwrap();
        let spanning = by_session(&records)
            .keys()
            .filter(|s| hashed.iter().filter(|sh| sh.iter().any(|r| r.session_id == **s)).count() > 1)
            .count();
        assert!(spanning > 0);
        assert_eq!(hashed.iter().map(Vec::len).sum::<usize>(), records.len());
        assert!(shard_logs(&records, 0, ShardKey::SessionId).is_err());
    }
}
