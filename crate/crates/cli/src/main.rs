use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dedupe_pipeline::characterize::{self, Window};
use dedupe_pipeline::datagen::{generate_dataset, shard_logs, GeneratorConfig, ShardKey};
use dedupe_pipeline::storage::codec::{log_compression, DEFAULT_LEVEL};
use dedupe_pipeline::storage::{compression_report, write_table, ColumnarFile, WriteOptions, DEFAULT_STRIPE_ROWS};
use dedupe_pipeline::tensors::DedupeModel;

mod bench;

#[derive(Parser)]
#[command(name = "dedupe", version, about = "Session-aware feature deduplication toolkit")]
struct Cli {
    /// Relative paths resolve against this directory.
    #[arg(long, global = true, env = "DEDUPE_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Dedup,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic impression log and write it as a columnar file.
    Gen {
        /// Generator config (TOML); defaults to the built-in high-duplication config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_STRIPE_ROWS)]
        stripe_rows: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the built-in generator config as TOML.
    DefaultConfig,
    /// Rewrite a columnar file clustered by session.
    Cluster {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STRIPE_ROWS)]
        stripe_rows: usize,
    },
    /// Compare log compression under session-keyed and hash-keyed sharding.
    Shard {
        dataset: PathBuf,
        #[arg(long, default_value_t = 8)]
        shards: usize,
    },
    /// Duplication statistics for a dataset.
    Characterize {
        dataset: PathBuf,
        /// Feature keys to measure; none gives dataset-level stats only.
        #[arg(long, value_delimiter = ',')]
        keys: Vec<String>,
        /// Measure every key in the file.
        #[arg(long, conflicts_with = "keys")]
        all_keys: bool,
        /// Also histogram sessions per batch of this many records.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Write per-feature stats as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the reader and trainer simulation and report both encodings.
    Bench {
        dataset: PathBuf,
        /// Dataloader spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Model spec (TOML).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Both)]
        mode: Mode,
        /// Overrides the dataloader spec's batch size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Overrides the model spec's rank count.
        #[arg(long)]
        ranks: Option<usize>,
        /// Overrides the model spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Leave wall-clock fields out of the report.
        #[arg(long)]
        omit_timings: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write gnuplot data files for a dataset.
    Plot {
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        keys: Vec<String>,
        #[arg(long, default_value_t = 4096)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    base.join(path)
}

pub fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
            Ok(())
        }
    }
}

fn open(path: &Path) -> Result<ColumnarFile> {
    ColumnarFile::open(path).with_context(|| format!("opening {}", path.display()))
}

#[derive(Serialize)]
struct GenSummary {
    path: PathBuf,
    records: usize,
    stripes: usize,
    raw_bytes: u64,
    compressed_bytes: u64,
}

fn cmd_gen(config: Option<&Path>, seed: Option<u64>, stripe_rows: usize, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(path) => GeneratorConfig::load(path).with_context(|| format!("config {}", path.display()))?,
        None => GeneratorConfig::default_high_dup(),
    };
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let records = generate_dataset(&cfg)?;
    let opts = WriteOptions {
        stripe_rows,
        keys: Some(cfg.feature_keys()),
        ..WriteOptions::default()
    };
    let file = write_table(&records, &opts)?;
    file.save(out).with_context(|| format!("writing {}", out.display()))?;
    let sizes = file.sizes();
    write_json(
        &GenSummary {
            path: out.to_owned(),
            records: records.len(),
            stripes: file.stripes().len(),
            raw_bytes: sizes.raw_bytes,
            compressed_bytes: sizes.compressed_bytes,
        },
        None,
    )
}

fn cmd_cluster(input: &Path, out: &Path, stripe_rows: usize) -> Result<()> {
    let before = open(input)?;
    let after = before.rewrite_clustered(stripe_rows)?;
    after.save(out).with_context(|| format!("writing {}", out.display()))?;
    write_json(&compression_report(&after, &before), None)
}

#[derive(Serialize)]
struct ShardReport {
    shards: usize,
    session_keyed: dedupe_pipeline::storage::codec::SizeStats,
    hash_keyed: dedupe_pipeline::storage::codec::SizeStats,
    session_ratio: f64,
    hash_ratio: f64,
}

fn cmd_shard(dataset: &Path, shards: usize) -> Result<()> {
    let records = open(dataset)?.read_all()?;
    let by_session = log_compression(&shard_logs(&records, shards, ShardKey::SessionId)?, DEFAULT_LEVEL)?;
    let by_hash = log_compression(&shard_logs(&records, shards, ShardKey::RandomHash)?, DEFAULT_LEVEL)?;
    write_json(
        &ShardReport {
            shards,
            session_keyed: by_session,
            hash_keyed: by_hash,
            session_ratio: by_session.ratio(),
            hash_ratio: by_hash.ratio(),
        },
        None,
    )
}

fn cmd_characterize(
    dataset: &Path,
    keys: Vec<String>,
    all_keys: bool,
    batch_size: Option<usize>,
    csv: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let file = open(dataset)?;
    let keys = if all_keys { file.keys().to_vec() } else { keys };
    if let Some(missing) = keys.iter().find(|k| !file.keys().contains(k)) {
        bail!("unknown feature key `{missing}`");
    }
    if batch_size == Some(0) {
        bail!("batch size must be >= 1");
    }
    let records = file.read_all()?;
    let stats = characterize::characterize(&records, &keys, batch_size);
    if let Some(path) = csv {
        let sink = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        characterize::write_csv(&stats.features, sink)?;
    }
    write_json(&stats, out)
}

fn write_dat(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "# {header}")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

const PLOT_SCRIPT: &str = r#"set terminal pngcairo size 900,600
set output 'sessions.png'
set logscale y
set xlabel 'samples per session'
set ylabel 'sessions'
plot 'sessions_partition.dat' using 1:2 with impulses title 'partition', \
     'sessions_batch.dat' using 1:2 with points title 'batch'
set output 'dedupe_model.png'
unset logscale
set xlabel 'probability unchanged'
set ylabel 'predicted dedupe factor'
plot for [c=2:4] 'dedupe_model.dat' using 1:c with lines title columnheader(c)
set output 'duplication.png'
set style data histograms
set ylabel 'percent'
plot 'duplication.dat' using 2:xtic(1) title 'exact', '' using 3 title 'partial'
"#;

fn cmd_plot(dataset: &Path, keys: Vec<String>, batch_size: usize, out: &Path) -> Result<()> {
    if batch_size == 0 {
        bail!("batch size must be >= 1");
    }
    let records = open(dataset)?.read_all()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hist_rows = |window| {
        characterize::session_histogram(&records, window)
            .counts
            .into_iter()
            .map(|(n, c)| format!("{n} {c}"))
            .collect::<Vec<_>>()
    };
    write_dat(
        &out.join("sessions_partition.dat"),
        "samples sessions",
        hist_rows(Window::Partition),
    )?;
    write_dat(
        &out.join("sessions_batch.dat"),
        "samples sessions",
        hist_rows(Window::Batch(batch_size)),
    )?;
    let sizes = [2.0, 8.0, 16.0];
    let model_rows = (0..=20).map(|i| {
        let d = i as f64 / 20.0;
        let factors: Vec<String> = sizes
            .iter()
            .map(|&s| {
                let f = DedupeModel::new(s, batch_size, 1.0, d)
                    .and_then(|m| m.dedupe_factor())
                    .expect("grid parameters are in range");
                format!("{f:.6}")
            })
            .collect();
        format!("{d:.2} {}", factors.join(" "))
    });
    let mut model_file: Vec<String> = vec!["d S=2 S=8 S=16".into()];
    model_file.extend(model_rows);
    write_dat(&out.join("dedupe_model.dat"), "predicted dedupe factor", model_file)?;
    let dup_rows = keys.iter().map(|k| {
        let s = characterize::feature_stats(&records, k, Window::Partition);
        format!("{} {:.4} {:.4}", s.feature, s.exact_pct, s.partial_pct)
    });
    write_dat(&out.join("duplication.dat"), "feature exact_pct partial_pct", dup_rows)?;
    std::fs::write(out.join("plots.gp"), PLOT_SCRIPT)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), (&'static str, anyhow::Error)> {
    let base = cli.data_dir;
    match cli.command {
        Command::Gen {
            config,
            seed,
            stripe_rows,
            out,
        } => cmd_gen(
            config.map(|c| resolve(&base, &c)).as_deref(),
            seed,
            stripe_rows,
            &resolve(&base, &out),
        )
        .map_err(|e| ("gen", e)),
        Command::DefaultConfig => {
            print!("{}", GeneratorConfig::default_high_dup().to_toml());
            Ok(())
        }
        Command::Cluster {
            input,
            out,
            stripe_rows,
        } => cmd_cluster(&resolve(&base, &input), &resolve(&base, &out), stripe_rows).map_err(|e| ("cluster", e)),
        Command::Shard { dataset, shards } => cmd_shard(&resolve(&base, &dataset), shards).map_err(|e| ("shard", e)),
        Command::Characterize {
            dataset,
            keys,
            all_keys,
            batch_size,
            csv,
            out,
        } => cmd_characterize(
            &resolve(&base, &dataset),
            keys,
            all_keys,
            batch_size,
            csv.map(|p| resolve(&base, &p)).as_deref(),
            out.map(|p| resolve(&base, &p)).as_deref(),
        )
        .map_err(|e| ("characterize", e)),
        Command::Bench {
            dataset,
            spec,
            model,
            mode,
            batch_size,
            ranks,
            seed,
            iterations,
            omit_timings,
            out,
        } => bench::cmd_bench(bench::BenchArgs {
            dataset: resolve(&base, &dataset),
            spec: resolve(&base, &spec),
            model: resolve(&base, &model),
            mode,
            batch_size,
            ranks,
            seed,
            iterations,
            omit_timings,
            out: out.map(|p| resolve(&base, &p)),
        }),
        Command::Plot {
            dataset,
            keys,
            batch_size,
            out,
        } => cmd_plot(&resolve(&base, &dataset), keys, batch_size, &resolve(&base, &out)).map_err(|e| ("plot", e)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, err)) => {
            eprintln!("error[{stage}]: {err:#}");
            ExitCode::FAILURE
        }
    }
}
