//! Command-line pipeline: prior sampling, training, single-task inference,
//! and benchmark sweeps.
//!
//! Every subcommand resolves a full [`RunConfig`] (defaults, then the
//! `--config` file, then flags) before doing any work, and subcommands that
//! produce files write the resolved config into the output directory as
//! `run.config` so results stay reproducible from their artifacts alone.
//!
//! Process exit codes: 0 success, 2 configuration error, 3 ingestion error,
//! 4 training or numeric error, 5 sweep finished with failed datasets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::backbone::TaskInput;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_csv, TabularDataset};
use crate::decoder::{majority_class_accuracy, per_layer_quality, train_bank};
use crate::error::{Error, Result};
use crate::eval::{column_stats, evaluate_dataset, render_text, sweep_csv, zscore_rows, EvalOptions};
use crate::exit::predict_early_exit;
use crate::metrics::{accuracy, macro_auc};
use crate::prior::{sample_task, HOLDOUT_TASK_BASE};
use crate::rng::Pcg32;

/// Held-out tasks behind the per-layer quality table printed by `train`.
const QUALITY_TASKS: usize = 20;

#[derive(Debug, Parser)]
#[command(
    name = "icx",
    version,
    about = "In-context tabular classifier with per-layer decoders and entropy-gated early exit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed (prior, model, sweep) at once.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes synthetic classification tasks as `task_{i}.csv` files.
    PriorSample {
        #[command(flatten)]
        common: CommonArgs,
        /// How many tasks to write.
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Trains the backbone and decoder bank, then writes one checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Classifies one CSV dataset with early exit and prints a report.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Dataset CSV with a header row.
        dataset: PathBuf,
        /// Label column name; overrides `data.label_column`.
        #[arg(long, value_name = "NAME")]
        label_column: Option<String>,
        /// Entropy threshold in nats; overrides `exit.tau`.
        #[arg(long, value_name = "F64")]
        tau: Option<f64>,
        /// Prints only the full-depth entropy trace (threshold forced to 0).
        #[arg(long)]
        trace_only: bool,
    },
    /// Sweeps entropy thresholds over every dataset in a manifest.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Manifest CSV with columns name,path,label_column.
        manifest: PathBuf,
        /// Threshold grid point; repeat the flag for more. Defaults to
        /// `sweep.taus`.
        #[arg(long = "tau", value_name = "F64")]
        taus: Vec<f64>,
        /// Cross-validation folds; overrides `sweep.folds`.
        #[arg(long, value_name = "N")]
        folds: Option<usize>,
        /// Fallback label column for manifest rows that leave theirs empty.
        #[arg(long, value_name = "NAME")]
        label_column: Option<String>,
        /// Evaluates datasets one after another so elapsed times are
        /// comparable; the default runs datasets on parallel threads.
        #[arg(long)]
        serial_timing: bool,
    },
}

/// Parses argv and runs the chosen subcommand.
pub fn run() -> Result<()> {
    dispatch(Cli::parse())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PriorSample { common, count } => {
            let config = resolve(&common)?;
            cmd_prior_sample(&config, count)
        }
        Command::Train { common } => {
            let config = resolve(&common)?;
            cmd_train(&config)
        }
        Command::Infer {
            common,
            checkpoint,
            dataset,
            label_column,
            tau,
            trace_only,
        } => {
            let mut config = resolve(&common)?;
            if let Some(name) = label_column {
                config.label_column = name;
            }
            if let Some(t) = tau {
                config.exit.tau = t;
            }
            cmd_infer(&config, &checkpoint, &dataset, trace_only)
        }
        Command::Sweep {
            common,
            checkpoint,
            manifest,
            taus,
            folds,
            label_column,
            serial_timing,
        } => {
            let mut config = resolve(&common)?;
            if !taus.is_empty() {
                config.sweep_taus = taus;
            }
            if let Some(f) = folds {
                config.folds = f;
            }
            if let Some(name) = label_column {
                config.label_column = name;
            }
            cmd_sweep(&config, &checkpoint, &manifest, serial_timing)
        }
    }
}

fn resolve(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Creates the output directory and drops the provenance copy of the
/// resolved configuration into it.
fn prepare_out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let provenance = dir.join("run.config");
    std::fs::write(&provenance, config.to_text()).map_err(|e| Error::io(&provenance, e))?;
    Ok(dir)
}

fn histogram_line(counts: &std::collections::BTreeMap<usize, usize>) -> String {
    counts
        .iter()
        .map(|(value, count)| format!("{value}:{count}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cmd_prior_sample(config: &RunConfig, count: usize) -> Result<()> {
    let dir = prepare_out_dir(config)?;
    let mut class_counts = std::collections::BTreeMap::new();
    let mut feature_counts = std::collections::BTreeMap::new();
    for i in 0..count {
        let task = sample_task(&config.prior, i as u64)?;
        let f = task.n_features;
        let mut text = String::new();
        for col in 0..f {
            write!(text, "x{col},").unwrap();
        }
        writeln!(text, "{}", config.label_column).unwrap();
        let rows = task
            .x_train
            .chunks(f)
            .zip(&task.y_train)
            .chain(task.x_test.chunks(f).zip(&task.y_test));
        for (row, &label) in rows {
            for value in row {
                write!(text, "{value},").unwrap();
            }
            writeln!(text, "{label}").unwrap();
        }
        let path = dir.join(format!("task_{i}.csv"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        *class_counts.entry(task.n_classes).or_insert(0) += 1;
        *feature_counts.entry(task.n_features).or_insert(0) += 1;
    }
    println!("wrote {count} tasks to {}", dir.display());
    println!("class-count histogram: {}", histogram_line(&class_counts));
    println!("feature-count histogram: {}", histogram_line(&feature_counts));
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(config)?;
    let checkpoint = if config.checkpoint.is_absolute() {
        config.checkpoint.clone()
    } else {
        dir.join(&config.checkpoint)
    };

    println!(
        "training backbone: {} steps, batch {}, lr {}",
        config.backbone_train.steps, config.backbone_train.batch_size, config.backbone_train.lr
    );
    let started = Instant::now();
    let (backbone, final_decoder) =
        crate::backbone::train_backbone(&config.model, &config.prior, &config.backbone_train)?;
    println!("backbone done in {:.1}s", started.elapsed().as_secs_f64());

    println!(
        "training {} intermediate decoders: {} epochs x {} steps, batch {}, lr {}",
        config.model.n_layers.saturating_sub(1),
        config.decoder_train.epochs,
        config.decoder_train.steps_per_epoch,
        config.decoder_train.batch_size,
        config.decoder_train.lr
    );
    let started = Instant::now();
    let bank = train_bank(&backbone, &final_decoder, &config.prior, &config.decoder_train)?;
    println!("decoders done in {:.1}s", started.elapsed().as_secs_f64());

    save_checkpoint(&checkpoint, &backbone, &bank)?;
    println!("checkpoint written to {}", checkpoint.display());

    let quality = per_layer_quality(
        &backbone,
        &bank,
        &config.prior,
        HOLDOUT_TASK_BASE,
        QUALITY_TASKS,
    )?;
    let mut majority = Vec::with_capacity(QUALITY_TASKS);
    for t in 0..QUALITY_TASKS {
        let task = sample_task(&config.prior, HOLDOUT_TASK_BASE + t as u64)?;
        majority.push(majority_class_accuracy(
            &task.y_train,
            &task.y_test,
            task.n_classes,
        ));
    }
    println!("per-layer quality on {QUALITY_TASKS} held-out tasks");
    println!("{:>5} {:>9} {:>10}", "layer", "accuracy", "macro_auc");
    for q in &quality {
        println!("{:>5} {:>9.4} {:>10.4}", q.layer, q.accuracy, q.macro_auc);
    }
    println!(
        "majority-class baseline accuracy: {:.4}",
        crate::metrics::mean(&majority)
    );
    Ok(())
}

fn format_trace(trace: &[f64]) -> String {
    let values: Vec<String> = trace.iter().map(|v| v.to_string()).collect();
    format!("entropy trace: {}", values.join(" "))
}

pub fn cmd_infer(
    config: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    trace_only: bool,
) -> Result<()> {
    let (backbone, bank) = load_checkpoint(checkpoint)?;
    let mut ds = load_csv(dataset, &config.label_column)?;
    check_capacity(&ds, &backbone.config)?;

    let n = ds.n_rows();
    let f = ds.n_features();
    let mut order: Vec<usize> = (0..n).collect();
    Pcg32::keyed(config.sweep_seed, 0x8020).shuffle(&mut order);
    let n_train = ((n * 4) / 5).clamp(1, n - 1);
    let (mut train_idx, mut test_idx) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    if train_idx.len() > config.max_context {
        let mut rng = Pcg32::keyed(config.sweep_seed, 0x8021);
        rng.shuffle(&mut train_idx);
        train_idx.truncate(config.max_context);
        train_idx.sort_unstable();
    }

    let data = ds.features.data();
    let (means, stds) = column_stats(data, &train_idx, f);
    let x_train = zscore_rows(data, &train_idx, f, &means, &stds);
    let x_test = zscore_rows(data, &test_idx, f, &means, &stds);
    let y_train: Vec<usize> = train_idx.iter().map(|&r| ds.labels[r]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&r| ds.labels[r]).collect();
    let task = TaskInput::new(&x_train, &y_train, &x_test, f, ds.n_classes)?;

    let mut exit_cfg = config.exit.clone();
    if trace_only {
        exit_cfg.tau = 0.0;
    }
    let report = predict_early_exit(&task, &backbone, &bank, &exit_cfg)?;
    if trace_only {
        println!("{}", format_trace(&report.entropy_trace));
        return Ok(());
    }

    if ds.name.is_empty() {
        ds.name = "dataset".into();
    }
    println!(
        "dataset {}: {} rows, {} features, {} classes ({} dropped)",
        ds.name,
        n,
        f,
        ds.n_classes,
        ds.dropped_rows
    );
    println!(
        "context rows: {}, query rows: {}, tau = {}, normalize = {}",
        train_idx.len(),
        test_idx.len(),
        exit_cfg.tau,
        exit_cfg.normalize_entropy
    );
    println!(
        "exit layer: {}/{} ({} decodes)",
        report.exit_layer, backbone.config.n_layers, report.decode_count
    );
    println!("{}", format_trace(&report.entropy_trace));
    println!("elapsed: {:.6} s", report.elapsed);
    println!("flops: {}", report.flops);

    println!("{:>4} {:<16} {:>12} {:<16}", "row", "predicted", "p", "actual");
    for (i, &row) in test_idx.iter().enumerate() {
        let probs = report.probs.row(i);
        let best = (0..ds.n_classes)
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
            .expect("at least two classes");
        println!(
            "{row:>4} {:<16} {:>12.4} {:<16}",
            ds.class_names[best], probs[best], ds.class_names[ds.labels[row]]
        );
    }
    println!("accuracy: {:.4}", accuracy(&report.probs, &y_test)?);
    match macro_auc(&report.probs, &y_test, ds.n_classes) {
        Ok(auc) => println!("macro AUC: {auc:.4}"),
        Err(err) => println!("macro AUC: undefined ({err})"),
    }
    Ok(())
}

fn check_capacity(ds: &TabularDataset, config: &crate::backbone::ModelConfig) -> Result<()> {
    if ds.n_features() > config.max_features {
        return Err(Error::Capacity {
            what: "dataset feature count",
            got: ds.n_features(),
            limit: config.max_features,
        });
    }
    if ds.n_classes > config.max_classes {
        return Err(Error::Capacity {
            what: "dataset class count",
            got: ds.n_classes,
            limit: config.max_classes,
        });
    }
    Ok(())
}

/// One dataset to sweep: display name, CSV path, label column.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    pub label_column: String,
}

/// Reads a manifest CSV with header `name,path,label_column`. Relative
/// dataset paths are resolved against the manifest's directory; an empty
/// label column falls back to `default_label`.
pub fn parse_manifest(path: &Path, default_label: &str) -> Result<Vec<ManifestEntry>> {
    let bad = |reason: String| Error::Ingestion {
        path: path.display().to_string(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(format!("cannot open manifest: {e}")))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| bad(format!("cannot read manifest header: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers != ["name", "path", "label_column"] {
        return Err(bad(format!(
            "manifest header must be name,path,label_column, got {}",
            headers.join(",")
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
        if record.len() != 3 {
            return Err(bad(format!("row {}: expected 3 cells", i + 2)));
        }
        let name = record[0].to_string();
        if name.is_empty() {
            return Err(bad(format!("row {}: dataset name is empty", i + 2)));
        }
        let raw = PathBuf::from(&record[1]);
        let resolved = if raw.is_absolute() { raw } else { base.join(raw) };
        let label = if record[2].is_empty() {
            default_label.to_string()
        } else {
            record[2].to_string()
        };
        entries.push(ManifestEntry {
            name,
            path: resolved,
            label_column: label,
        });
    }
    if entries.is_empty() {
        return Err(bad("manifest lists no datasets".into()));
    }
    Ok(entries)
}

fn safe_file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn sweep_one(
    entry: &ManifestEntry,
    backbone: &crate::backbone::BackboneWeights,
    bank: &crate::decoder::DecoderBank,
    opts: &EvalOptions,
) -> Result<crate::eval::SweepReport> {
    let mut ds = load_csv(&entry.path, &entry.label_column)?;
    ds.name = entry.name.clone();
    evaluate_dataset(&ds, backbone, bank, opts)
}

pub fn cmd_sweep(
    config: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    serial_timing: bool,
) -> Result<()> {
    let dir = prepare_out_dir(config)?;
    let (backbone, bank) = load_checkpoint(checkpoint)?;
    let entries = parse_manifest(manifest, &config.label_column)?;
    let opts = EvalOptions {
        taus: config.sweep_taus.clone(),
        folds: config.folds,
        seed: config.sweep_seed,
        exit: config.exit.clone(),
        max_context: config.max_context,
    };

    let outcomes: Vec<Result<crate::eval::SweepReport>> =
        if serial_timing || entries.len() < 2 {
            entries
                .iter()
                .map(|entry| sweep_one(entry, &backbone, &bank, &opts))
                .collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = entries
                    .iter()
                    .map(|entry| scope.spawn(|| sweep_one(entry, &backbone, &bank, &opts)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
            })
        };

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (entry, outcome) in entries.iter().zip(outcomes) {
        match outcome {
            Ok(report) => {
                let csv_path = dir.join(format!("{}.sweep.csv", safe_file_stem(&entry.name)));
                std::fs::write(&csv_path, sweep_csv(&report))
                    .map_err(|e| Error::io(&csv_path, e))?;
                reports.push(report);
            }
            Err(err) => failures.push((entry.name.clone(), err)),
        }
    }

    let mut text = render_text(&reports);
    if !failures.is_empty() {
        text.push_str("\nfailed datasets\n");
        for (name, err) in &failures {
            let _ = writeln!(text, "  {name}: {err}");
        }
    }
    let report_path = dir.join("report.txt");
    std::fs::write(&report_path, &text).map_err(|e| Error::io(&report_path, e))?;
    print!("{text}");
    println!("reports written to {}", dir.display());

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::PartialSweep {
            failed: failures.len(),
            total: entries.len(),
        })
    }
}
