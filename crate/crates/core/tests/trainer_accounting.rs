use dedupe_pipeline::datagen::{generate_dataset, GeneratorConfig};
use dedupe_pipeline::reader::{read_rows, DataloaderSpec, PipelineMode, ReaderBatch, Transform, TransformOp};
use dedupe_pipeline::storage::cluster_by_session;
use dedupe_pipeline::tensors::measured_dedupe_factor;
use dedupe_pipeline::trainer_sim::{
    first_score_mismatch, forward_iteration, prepare_local, sdd, Model, ModelSpec, PoolingGroup, PoolingKind,
    SparseInput, TableSpec,
};
use dedupe_pipeline::ImpressionRecord;

const BUCKETS: u64 = 4096;

fn clustered_records() -> Vec<ImpressionRecord> {
    cluster_by_session(&generate_dataset(&GeneratorConfig::default_high_dup()).unwrap())
}

fn loader(batch_size: usize) -> DataloaderSpec {
    let keys = GeneratorConfig::default_high_dup().feature_keys();
    DataloaderSpec {
        dedup_sparse_features: vec![
            vec!["user_liked_items".into()],
            vec!["user_shared_items".into()],
            vec!["cart_item_ids".into(), "cart_seller_ids".into()],
        ],
        transforms: keys
            .iter()
            .map(|k| Transform::new(k, TransformOp::ModuloHash { buckets: BUCKETS }))
            .collect(),
        keys,
        batch_size,
    }
}

fn model(ranks: usize, pooling: Vec<PoolingGroup>) -> Model {
    Model::new(&ModelSpec {
        dim: 8,
        num_ranks: ranks,
        seed: 11,
        tables: GeneratorConfig::default_high_dup()
            .feature_keys()
            .into_iter()
            .map(|key| TableSpec {
                key,
                rows: BUCKETS as usize,
            })
            .collect(),
        pooling,
        sharding: None,
    })
    .unwrap()
}

fn default_pooling() -> Vec<PoolingGroup> {
    vec![
        PoolingGroup {
            keys: vec!["user_liked_items".into()],
            op: PoolingKind::Attention,
        },
        PoolingGroup {
            keys: vec!["cart_item_ids".into(), "cart_seller_ids".into()],
            op: PoolingKind::Sum,
        },
    ]
}

fn batches(records: &[ImpressionRecord], spec: &DataloaderSpec, count: usize) -> Vec<ReaderBatch> {
    records
        .chunks(spec.batch_size)
        .take(count)
        .map(|rows| read_rows(rows, spec, PipelineMode::Dedup).unwrap().0)
        .collect()
}

#[test]
fn sdd_bytes_track_measured_dedupe_factor() {
    let records = clustered_records();
    let spec = loader(4096);
    let model = model(4, default_pooling());
    let batches = batches(&records, &spec, 4);
    let inputs: Vec<SparseInput<'_>> = batches.iter().map(SparseInput::from).collect();
    let route = |mode| {
        let locals: Vec<_> = inputs.iter().map(|i| prepare_local(*i, &model, mode).unwrap()).collect();
        let out = sdd(&locals, &model).unwrap();
        (out.values_bytes_fwd, out.slice_bytes_fwd)
    };
    let (base_values, base_slices) = route(PipelineMode::Baseline);
    let (dedup_values, dedup_slices) = route(PipelineMode::Dedup);

    for group in &spec.dedup_sparse_features {
        for key in group {
            let (mut dedup_len, mut base_len) = (0usize, 0usize);
            for b in &batches {
                let ikjt = b.ikjts.iter().find(|i| i.contains(key)).unwrap();
                let factor = measured_dedupe_factor(ikjt, &ikjt.to_kjt()).unwrap()[key.as_str()];
                assert!(factor >= 1.0);
                dedup_len += ikjt.feature(key).unwrap().values().len();
                base_len += ikjt.expand(key).unwrap().values().len();
            }
            let inv_factor = dedup_len as f64 / base_len as f64;
            let values_ratio = dedup_values[key.as_str()] as f64 / base_values[key.as_str()] as f64;
            assert_eq!(values_ratio, inv_factor, "{key}");
            let slice_ratio = dedup_slices[key.as_str()] as f64 / base_slices[key.as_str()] as f64;
            assert!(
                (slice_ratio - inv_factor).abs() <= 0.05 * inv_factor,
                "{key}: slice ratio {slice_ratio} vs 1/factor {inv_factor}"
            );
        }
    }
    // ungrouped features travel unchanged
    assert_eq!(dedup_values["item_id"], base_values["item_id"]);
}

#[test]
fn lookup_ratio_matches_batch_contents() {
    let records = clustered_records();
    let spec = loader(4096);
    let model = model(2, default_pooling());
    let batches = batches(&records, &spec, 2);
    let inputs: Vec<SparseInput<'_>> = batches.iter().map(SparseInput::from).collect();
    let base = forward_iteration(&inputs, &model, PipelineMode::Baseline).unwrap();
    let dedup = forward_iteration(&inputs, &model, PipelineMode::Dedup).unwrap();
    assert_eq!(first_score_mismatch(&base.scores, &dedup.scores), None);

    let (mut stored, mut logical) = (0u64, 0u64);
    for b in &batches {
        let expanded = b.to_logical(&spec.keys).unwrap();
        for key in &spec.keys {
            stored += b.stored_elements(key).unwrap() as u64;
            logical += expanded.get(key).unwrap().values().len() as u64;
        }
    }
    assert_eq!(dedup.stats.lookup_count, stored);
    assert_eq!(base.stats.lookup_count, logical);
    assert!(dedup.stats.dominance_violations(&base.stats).is_empty());
}

#[test]
fn activation_savings_follow_group_factor() {
    let records = clustered_records();
    let spec = loader(4096);
    // the liked-items table alone, so activations belong to one group
    let model = Model::new(&ModelSpec {
        dim: 8,
        num_ranks: 1,
        seed: 2,
        tables: vec![TableSpec {
            key: "user_liked_items".into(),
            rows: BUCKETS as usize,
        }],
        pooling: vec![],
        sharding: None,
    })
    .unwrap();
    for b in batches(&records, &spec, 6) {
        let ikjt = b.ikjts.iter().find(|i| i.contains("user_liked_items")).unwrap();
        let factor = measured_dedupe_factor(ikjt, &ikjt.to_kjt()).unwrap()["user_liked_items"];
        let input = [SparseInput::from(&b)];
        let base = forward_iteration(&input, &model, PipelineMode::Baseline).unwrap();
        let dedup = forward_iteration(&input, &model, PipelineMode::Dedup).unwrap();
        let ratio = dedup.stats.activation_elements as f64 / base.stats.activation_elements as f64;
        assert!(factor >= 1.5, "default config batches should deduplicate, got {factor}");
        assert!(ratio < 1.0 / 1.5, "activation ratio {ratio} at factor {factor}");
        assert!((ratio - 1.0 / factor).abs() < 1e-12);
    }
}

#[test]
fn lookup_ratio_is_stable_when_batch_doubles() {
    let records = clustered_records();
    let model = model(1, default_pooling());
    let ratio = |batch_size: usize| {
        let spec = loader(batch_size);
        let (mut d, mut b) = (0u64, 0u64);
        // same rows for both batch sizes
        for batch in batches(&records[..32_768], &spec, usize::MAX) {
            let input = [SparseInput::from(&batch)];
            d += forward_iteration(&input, &model, PipelineMode::Dedup).unwrap().stats.lookup_count;
            b += forward_iteration(&input, &model, PipelineMode::Baseline).unwrap().stats.lookup_count;
        }
        d as f64 / b as f64
    };
    let (small, large) = (ratio(2048), ratio(4096));
    assert!((small - large).abs() <= 0.05 * large, "{small} vs {large}");
}

#[test]
fn single_row_batches_cost_the_same() {
    let records = clustered_records();
    let spec = loader(1);
    let model = model(2, default_pooling());
    let batches = batches(&records, &spec, 2);
    let inputs: Vec<SparseInput<'_>> = batches.iter().map(SparseInput::from).collect();
    let base = forward_iteration(&inputs, &model, PipelineMode::Baseline).unwrap();
    let dedup = forward_iteration(&inputs, &model, PipelineMode::Dedup).unwrap();
    assert_eq!(base.scores, dedup.scores);
    assert_eq!(base.stats, dedup.stats);
}
