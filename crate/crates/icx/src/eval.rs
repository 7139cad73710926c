//! Cross-validated accuracy-versus-runtime sweeps over loaded datasets.
//!
//! For each fold the train split becomes the in-context examples and the
//! test split becomes the queries. Features are z-scored with train-fold
//! statistics, oversized context is subsampled deterministically, and each
//! entropy threshold runs the full early-exit pipeline so wall-clock
//! numbers reflect what the threshold actually saves. A `tau = 0` baseline
//! (never exits early) is always included for reference.

use crate::backbone::{BackboneWeights, TaskInput};
use crate::dataset::TabularDataset;
use crate::decoder::DecoderBank;
use crate::error::{Error, Result};
use crate::exit::{predict_early_exit, ExitConfig};
use crate::metrics::{accuracy, kfold_split, macro_auc, mean, sample_std};
use crate::rng::Pcg32;

/// Threshold grid used when the caller does not supply one.
pub const DEFAULT_TAUS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Column order shared by [`sweep_csv`] and [`parse_sweep_csv`].
pub const SWEEP_CSV_HEADER: &str =
    "tau,mean_auc,std_auc,mean_accuracy,mean_exit_layer,mean_elapsed_s,runtime_delta_s";

/// Settings for one dataset sweep.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Entropy thresholds to evaluate; 0 is added if absent.
    pub taus: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    /// Template for the exit policy; `tau` is overridden per grid point.
    pub exit: ExitConfig,
    /// Most train rows fed as context per fold; larger folds are
    /// subsampled with a seeded shuffle.
    pub max_context: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            taus: DEFAULT_TAUS.to_vec(),
            folds: 5,
            seed: 0,
            exit: ExitConfig::default(),
            max_context: 256,
        }
    }
}

/// Aggregated fold metrics for one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_accuracy: f64,
    pub mean_exit_layer: f64,
    pub mean_elapsed_s: f64,
    /// `mean_elapsed_s` minus the `tau = 0` baseline's; negative when the
    /// threshold saves time.
    pub runtime_delta_s: f64,
}

/// A fold that produced no metrics, and why.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldFailure {
    pub fold: usize,
    pub reason: String,
}

/// Result of sweeping one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub dataset: String,
    pub n_rows: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub folds_requested: usize,
    pub folds_used: usize,
    pub seed: u64,
    /// One row per threshold, sorted by `tau`; means are over the
    /// successful folds only.
    pub rows: Vec<SweepRow>,
    pub skipped_folds: Vec<FoldFailure>,
}

/// Metrics from one fold at one threshold.
struct FoldPoint {
    auc: f64,
    accuracy: f64,
    exit_layer: usize,
    elapsed: f64,
}

fn tau_grid(taus: &[f64], exit: &ExitConfig, n_layers: usize) -> Result<Vec<f64>> {
    if taus.is_empty() {
        return Err(Error::Config("tau grid must not be empty".into()));
    }
    let mut grid: Vec<f64> = taus.iter().map(|&t| if t == 0.0 { 0.0 } else { t }).collect();
    grid.push(0.0);
    for &t in &grid {
        let mut cfg = exit.clone();
        cfg.tau = t;
        cfg.validate(n_layers)?;
    }
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();
    Ok(grid)
}

/// Runs one fold: z-score by train statistics, cap the context, then
/// evaluate every threshold on the same context and queries.
/// Per-column mean and standard deviation of `rows` within flat row-major
/// `data` (biased variance; degenerate columns get a unit scale so they are
/// centered but not blown up).
pub(crate) fn column_stats(data: &[f64], rows: &[usize], f: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = vec![0.0; f];
    let mut stds = vec![0.0; f];
    for col in 0..f {
        let mut m = 0.0;
        for &r in rows {
            m += data[r * f + col];
        }
        m /= rows.len() as f64;
        let mut var = 0.0;
        for &r in rows {
            let d = data[r * f + col] - m;
            var += d * d;
        }
        var /= rows.len() as f64;
        means[col] = m;
        stds[col] = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
    }
    (means, stds)
}

/// Gathers `rows` from `data` and standardizes them with the given stats.
pub(crate) fn zscore_rows(
    data: &[f64],
    rows: &[usize],
    f: usize,
    means: &[f64],
    stds: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        for col in 0..f {
            out.push((data[r * f + col] - means[col]) / stds[col]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    ds: &TabularDataset,
    backbone: &BackboneWeights,
    bank: &DecoderBank,
    grid: &[f64],
    opts: &EvalOptions,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<Vec<FoldPoint>> {
    let f = ds.n_features();
    let data = ds.features.data();
    let (means, stds) = column_stats(data, train_idx, f);

    let mut context: Vec<usize> = train_idx.to_vec();
    if context.len() > opts.max_context {
        let mut rng = Pcg32::keyed(opts.seed, 0x5AB5_0000 + fold as u64);
        rng.shuffle(&mut context);
        context.truncate(opts.max_context);
        context.sort_unstable();
    }

    let x_train = zscore_rows(data, &context, f, &means, &stds);
    let x_test = zscore_rows(data, test_idx, f, &means, &stds);
    let y_train: Vec<usize> = context.iter().map(|&r| ds.labels[r]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&r| ds.labels[r]).collect();

    let task = TaskInput::new(&x_train, &y_train, &x_test, f, ds.n_classes)?;
    let mut points = Vec::with_capacity(grid.len());
    for &tau in grid {
        let mut cfg = opts.exit.clone();
        cfg.tau = tau;
        let report = predict_early_exit(&task, backbone, bank, &cfg)?;
        points.push(FoldPoint {
            auc: macro_auc(&report.probs, &y_test, ds.n_classes)?,
            accuracy: accuracy(&report.probs, &y_test)?,
            exit_layer: report.exit_layer,
            elapsed: report.elapsed,
        });
    }
    Ok(points)
}

/// Sweeps `ds` across the threshold grid with k-fold cross validation.
///
/// Folds where any metric is undefined (for example a single-class test
/// split) are skipped and reported in the returned summary; the sweep
/// fails only when every fold fails. Everything except the elapsed-time
/// fields is deterministic in `(dataset, weights, opts)`.
pub fn evaluate_dataset(
    ds: &TabularDataset,
    backbone: &BackboneWeights,
    bank: &DecoderBank,
    opts: &EvalOptions,
) -> Result<SweepReport> {
    ds.validate()?;
    let config = &backbone.config;
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
    if opts.max_context == 0 {
        return Err(Error::Config("max_context must be at least 1".into()));
    }
    let grid = tau_grid(&opts.taus, &opts.exit, config.n_layers)?;
    let splits = kfold_split(ds.n_rows(), opts.folds, opts.seed)?;

    let mut per_fold: Vec<Vec<FoldPoint>> = Vec::new();
    let mut skipped_folds = Vec::new();
    for (fold, (train_idx, test_idx)) in splits.iter().enumerate() {
        match run_fold(ds, backbone, bank, &grid, opts, fold, train_idx, test_idx) {
            Ok(points) => per_fold.push(points),
            Err(err) => skipped_folds.push(FoldFailure {
                fold,
                reason: err.to_string(),
            }),
        }
    }
    if per_fold.is_empty() {
        return Err(Error::Metric(format!(
            "every fold of dataset {:?} failed; first failure: {}",
            ds.name, skipped_folds[0].reason
        )));
    }

    let column = |j: usize, pick: &dyn Fn(&FoldPoint) -> f64| -> Vec<f64> {
        per_fold.iter().map(|points| pick(&points[j])).collect()
    };
    let elapsed_means: Vec<f64> = (0..grid.len())
        .map(|j| mean(&column(j, &|p| p.elapsed)))
        .collect();
    let baseline = grid
        .iter()
        .position(|&t| t == 0.0)
        .expect("grid always contains the tau = 0 baseline");

    let rows = grid
        .iter()
        .enumerate()
        .map(|(j, &tau)| {
            let aucs = column(j, &|p| p.auc);
            SweepRow {
                tau,
                mean_auc: mean(&aucs),
                std_auc: sample_std(&aucs),
                mean_accuracy: mean(&column(j, &|p| p.accuracy)),
                mean_exit_layer: mean(&column(j, &|p| p.exit_layer as f64)),
                mean_elapsed_s: elapsed_means[j],
                runtime_delta_s: elapsed_means[j] - elapsed_means[baseline],
            }
        })
        .collect();

    Ok(SweepReport {
        dataset: ds.name.clone(),
        n_rows: ds.n_rows(),
        n_features: ds.n_features(),
        n_classes: ds.n_classes,
        folds_requested: opts.folds,
        folds_used: per_fold.len(),
        seed: opts.seed,
        rows,
        skipped_folds,
    })
}

/// Serializes the sweep rows as CSV. Floats use the shortest
/// representation that round-trips, so [`parse_sweep_csv`] recovers them
/// bit for bit.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.tau,
            r.mean_auc,
            r.std_auc,
            r.mean_accuracy,
            r.mean_exit_layer,
            r.mean_elapsed_s,
            r.runtime_delta_s
        ));
    }
    out
}

/// Parses CSV produced by [`sweep_csv`]. `source` only labels errors.
pub fn parse_sweep_csv(source: &str, text: &str) -> Result<Vec<SweepRow>> {
    let bad = |reason: String| Error::Ingestion {
        path: source.to_string(),
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == SWEEP_CSV_HEADER => {}
        other => {
            return Err(bad(format!(
                "expected header {SWEEP_CSV_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(format!(
                "row {}: expected 7 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let value = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: field {}: {e}", i + 2, k + 1)))
        };
        rows.push(SweepRow {
            tau: value(0)?,
            mean_auc: value(1)?,
            std_auc: value(2)?,
            mean_accuracy: value(3)?,
            mean_exit_layer: value(4)?,
            mean_elapsed_s: value(5)?,
            runtime_delta_s: value(6)?,
        });
    }
    Ok(rows)
}

fn push_table_header(out: &mut String) {
    out.push_str(&format!(
        "  {:>7} {:>9} {:>8} {:>9} {:>11} {:>12} {:>12}\n",
        "tau", "mean_auc", "std_auc", "mean_acc", "exit_layer", "elapsed_s", "delta_s"
    ));
}

fn push_table_row(out: &mut String, r: &SweepRow) {
    out.push_str(&format!(
        "  {:>7.4} {:>9.4} {:>8.4} {:>9.4} {:>11.2} {:>12.6} {:>+12.6}\n",
        r.tau,
        r.mean_auc,
        r.std_auc,
        r.mean_accuracy,
        r.mean_exit_layer,
        r.mean_elapsed_s,
        r.runtime_delta_s
    ));
}

/// Renders per-dataset tables, a cross-dataset aggregate, and the
/// speedup-versus-quality tradeoff relative to each `tau = 0` baseline.
pub fn render_text(reports: &[SweepReport]) -> String {
    let mut out = String::new();
    for rep in reports {
        out.push_str(&format!(
            "dataset {}: {} rows, {} features, {} classes, folds {}/{}, seed {}\n",
            rep.dataset,
            rep.n_rows,
            rep.n_features,
            rep.n_classes,
            rep.folds_used,
            rep.folds_requested,
            rep.seed
        ));
        push_table_header(&mut out);
        for r in &rep.rows {
            push_table_row(&mut out, r);
        }
        for skip in &rep.skipped_folds {
            out.push_str(&format!("  skipped fold {}: {}\n", skip.fold, skip.reason));
        }
        out.push('\n');
    }

    if reports.len() > 1 {
        let mut taus: Vec<f64> = reports
            .iter()
            .flat_map(|r| r.rows.iter().map(|row| row.tau))
            .collect();
        taus.sort_by(|a, b| a.total_cmp(b));
        taus.dedup();
        out.push_str(&format!("aggregate over {} datasets\n", reports.len()));
        push_table_header(&mut out);
        for &tau in &taus {
            let rows: Vec<&SweepRow> = reports
                .iter()
                .filter_map(|r| r.rows.iter().find(|row| row.tau == tau))
                .collect();
            let avg = |pick: &dyn Fn(&SweepRow) -> f64| -> f64 {
                mean(&rows.iter().map(|r| pick(r)).collect::<Vec<f64>>())
            };
            push_table_row(
                &mut out,
                &SweepRow {
                    tau,
                    mean_auc: avg(&|r| r.mean_auc),
                    std_auc: avg(&|r| r.std_auc),
                    mean_accuracy: avg(&|r| r.mean_accuracy),
                    mean_exit_layer: avg(&|r| r.mean_exit_layer),
                    mean_elapsed_s: avg(&|r| r.mean_elapsed_s),
                    runtime_delta_s: avg(&|r| r.runtime_delta_s),
                },
            );
        }
        out.push('\n');
    }

    out.push_str("tradeoff against the tau = 0 baseline\n");
    out.push_str(&format!(
        "  {:<20} {:>7} {:>9} {:>14}\n",
        "dataset", "tau", "speedup", "auc_drop_pct"
    ));
    for rep in reports {
        let base = rep
            .rows
            .iter()
            .find(|r| r.tau == 0.0)
            .expect("reports always carry the tau = 0 baseline");
        for r in rep.rows.iter().filter(|r| r.tau != 0.0) {
            let speedup = if r.mean_elapsed_s > 0.0 {
                base.mean_elapsed_s / r.mean_elapsed_s
            } else {
                f64::NAN
            };
            let drop = if base.mean_auc > 0.0 {
                (base.mean_auc - r.mean_auc) / base.mean_auc * 100.0
            } else {
                f64::NAN
            };
            out.push_str(&format!(
                "  {:<20} {:>7.4} {:>8.2}x {:>13.2}%\n",
                rep.dataset, r.tau, speedup, drop
            ));
        }
    }
    out
}
