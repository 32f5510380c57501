use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use dedupe_pipeline::reader::{DataloaderSpec, PipelineMode, Reader, ReaderBatch, StageTimings};
use dedupe_pipeline::storage::{Clustering, ColumnarFile};
use dedupe_pipeline::trainer_sim::{first_score_mismatch, forward_iteration, IterationStats, Model, ModelSpec, SparseInput};

use crate::{write_json, Mode};

pub struct BenchArgs {
    pub dataset: PathBuf,
    pub spec: PathBuf,
    pub model: PathBuf,
    pub mode: Mode,
    pub batch_size: Option<usize>,
    pub ranks: Option<usize>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub omit_timings: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub spec: PathBuf,
    pub model: PathBuf,
    pub mode: Mode,
    pub batch_size: usize,
    pub ranks: usize,
    pub seed: u64,
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct StorageSummary {
    pub rows: u64,
    pub stripes: usize,
    pub clustered: bool,
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
    pub compression_ratio: f64,
}

#[derive(Debug, Default, Serialize)]
pub struct TimingReport {
    pub fill_s: f64,
    pub convert_s: f64,
    pub process_s: f64,
    pub emit_s: f64,
    pub reader_total_s: f64,
    pub trainer_s: f64,
}

#[derive(Debug, Default, Serialize)]
pub struct ModeReport {
    pub iterations: usize,
    pub batches: usize,
    pub rows: usize,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub stats: IterationStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<TimingReport>,
}

/// Dedup over baseline for each counter.
#[derive(Debug, Serialize)]
pub struct Derived {
    pub bytes_out_ratio: f64,
    pub a2a_bytes_fwd_ratio: f64,
    pub a2a_bytes_back_ratio: f64,
    pub lookup_ratio: f64,
    pub activation_ratio: f64,
    pub pooling_mac_ratio: f64,
    /// Always true in a finished report; a mismatch aborts the run.
    pub scores_bit_identical: bool,
    /// Baseline reader time over dedup reader time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reader_speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainer_speedup: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub config: RunConfig,
    pub storage: StorageSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ModeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dedup: Option<ModeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derived: Option<Derived>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Default)]
struct Accumulator {
    report: ModeReport,
    reader: StageTimings,
    trainer: Duration,
}

impl Accumulator {
    fn add_batches(&mut self, batches: &[ReaderBatch]) {
        for b in batches {
            self.report.batches += 1;
            self.report.rows += b.batch_size();
            self.report.bytes_in += b.bytes_in;
            self.report.bytes_out += b.bytes_out;
            self.reader.accumulate(&b.timings);
        }
    }

    fn finish(mut self, omit_timings: bool) -> ModeReport {
        if !omit_timings {
            self.report.timings = Some(TimingReport {
                fill_s: self.reader.fill.as_secs_f64(),
                convert_s: self.reader.convert.as_secs_f64(),
                process_s: self.reader.process.as_secs_f64(),
                emit_s: self.reader.emit.as_secs_f64(),
                reader_total_s: self.reader.total().as_secs_f64(),
                trainer_s: self.trainer.as_secs_f64(),
            });
        }
        self.report
    }
}

/// Pulls one batch per rank; `None` when the stream cannot fill a whole
/// iteration of equal-sized batches.
fn next_iteration(reader: &mut Reader<'_>, ranks: usize) -> Result<Option<Vec<ReaderBatch>>> {
    let mut batches = Vec::with_capacity(ranks);
    for _ in 0..ranks {
        match reader.next() {
            Some(item) => batches.push(item?.0),
            None => return Ok(None),
        }
    }
    let b = batches[0].batch_size();
    Ok(batches.iter().all(|x| x.batch_size() == b).then_some(batches))
}

fn run_mode(
    batches: &[ReaderBatch],
    model: &Model,
    mode: PipelineMode,
    acc: &mut Accumulator,
) -> Result<Vec<Vec<f32>>> {
    let inputs: Vec<SparseInput<'_>> = batches.iter().map(SparseInput::from).collect();
    let start = Instant::now();
    let out = forward_iteration(&inputs, model, mode)?;
    acc.trainer += start.elapsed();
    acc.report.iterations += 1;
    acc.report.stats.merge(&out.stats);
    acc.add_batches(batches);
    Ok(out.scores)
}

pub fn cmd_bench(args: BenchArgs) -> Result<(), (&'static str, anyhow::Error)> {
    let setup = |e: anyhow::Error| ("bench/setup", e);
    let file = ColumnarFile::open(&args.dataset)
        .with_context(|| format!("opening {}", args.dataset.display()))
        .map_err(setup)?;
    let mut spec = DataloaderSpec::load(&args.spec)
        .with_context(|| format!("dataloader spec {}", args.spec.display()))
        .map_err(setup)?;
    if let Some(b) = args.batch_size {
        spec.batch_size = b;
    }
    let mut model_spec = ModelSpec::load(&args.model)
        .with_context(|| format!("model spec {}", args.model.display()))
        .map_err(setup)?;
    if let Some(r) = args.ranks {
        model_spec.num_ranks = r;
    }
    if let Some(s) = args.seed {
        model_spec.seed = s;
    }
    let model = Model::new(&model_spec).context("building model").map_err(setup)?;
    let ranks = model.num_ranks();

    let modes: Vec<PipelineMode> = match args.mode {
        Mode::Baseline => vec![PipelineMode::Baseline],
        Mode::Dedup => vec![PipelineMode::Dedup],
        Mode::Both => vec![PipelineMode::Baseline, PipelineMode::Dedup],
    };
    let mut readers = modes
        .iter()
        .map(|&m| Reader::new(&file, &spec, m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ("bench/read", e.into()))?;
    let mut accs: Vec<Accumulator> = modes.iter().map(|_| Accumulator::default()).collect();

    let mut iteration = 0usize;
    while args.iterations.map_or(true, |n| iteration < n) {
        let mut per_mode = Vec::with_capacity(modes.len());
        for reader in readers.iter_mut() {
            per_mode.push(next_iteration(reader, ranks).map_err(|e| ("bench/read", e))?);
        }
        let Some(per_mode) = per_mode.into_iter().collect::<Option<Vec<_>>>() else {
            break;
        };
        let mut scores = Vec::with_capacity(modes.len());
        for ((batches, &mode), acc) in per_mode.iter().zip(&modes).zip(accs.iter_mut()) {
            scores.push(
                run_mode(batches, &model, mode, acc)
                    .with_context(|| format!("iteration {iteration}"))
                    .map_err(|e| ("bench/train", e))?,
            );
        }
        if let [base, dedup] = scores.as_slice() {
            if let Some((rank, row)) = first_score_mismatch(base, dedup) {
                return Err((
                    "bench/verify",
                    anyhow!("iteration {iteration}: dedup score differs from baseline at rank {rank}, row {row}"),
                ));
            }
        }
        iteration += 1;
    }

    let mut reports: Vec<ModeReport> = accs.into_iter().map(|a| a.finish(args.omit_timings)).collect();
    let (baseline, dedup) = match args.mode {
        Mode::Baseline => (reports.pop(), None),
        Mode::Dedup => (None, reports.pop()),
        Mode::Both => {
            let dedup = reports.pop();
            (reports.pop(), dedup)
        }
    };
    let derived = match (&baseline, &dedup) {
        (Some(b), Some(d)) => {
            let violations = d.stats.dominance_violations(&b.stats);
            if !violations.is_empty() {
                return Err((
                    "bench/verify",
                    anyhow!("dedup counters exceed baseline: {}", violations.join(", ")),
                ));
            }
            let speedup = |f: fn(&TimingReport) -> f64| match (&b.timings, &d.timings) {
                (Some(bt), Some(dt)) if f(dt) > 0.0 => Some(f(bt) / f(dt)),
                _ => None,
            };
            Some(Derived {
                bytes_out_ratio: ratio(d.bytes_out, b.bytes_out),
                a2a_bytes_fwd_ratio: ratio(d.stats.a2a_bytes_fwd, b.stats.a2a_bytes_fwd),
                a2a_bytes_back_ratio: ratio(d.stats.a2a_bytes_back, b.stats.a2a_bytes_back),
                lookup_ratio: ratio(d.stats.lookup_count, b.stats.lookup_count),
                activation_ratio: ratio(d.stats.activation_elements, b.stats.activation_elements),
                pooling_mac_ratio: ratio(d.stats.pooling_mac_count, b.stats.pooling_mac_count),
                reader_speedup: speedup(|t| t.reader_total_s),
                trainer_speedup: speedup(|t| t.trainer_s),
                scores_bit_identical: true,
            })
        }
        _ => None,
    };

    let sizes = file.sizes();
    let report = BenchReport {
        config: RunConfig {
            dataset: args.dataset.clone(),
            spec: args.spec.clone(),
            model: args.model.clone(),
            mode: args.mode,
            batch_size: spec.batch_size,
            ranks,
            seed: model_spec.seed,
            max_iterations: args.iterations,
        },
        storage: StorageSummary {
            rows: file.num_rows(),
            stripes: file.stripes().len(),
            clustered: file.clustering() == Clustering::BySession,
            raw_bytes: sizes.raw_bytes,
            compressed_bytes: sizes.compressed_bytes,
            compression_ratio: sizes.ratio(),
        },
        baseline,
        dedup,
        derived,
    };
    write_json(&report, args.out.as_deref()).map_err(|e| ("bench/report", e))
}
