//! Python bindings for the early-exit tabular in-context classifier.
//!
//! The module exposes the crate's training and inference surface on plain
//! Python data: nested lists of floats in, nested lists of floats out, no
//! array library required. Training and prediction release the interpreter
//! lock so other Python threads keep running while Rust works.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use icx::backbone::{
    train_backbone, BackboneTrainParams, BackboneWeights, ModelConfig, TaskInput,
};
use icx::checkpoint::{load_checkpoint, save_checkpoint};
use icx::decoder::{train_bank, DecoderBank, DecoderTrainParams};
use icx::exit::{self, ExitConfig};
use icx::metrics;
use icx::prior::{self, PriorConfig};
use icx::Tensor;

/// Maps a crate error onto the closest builtin Python exception.
fn raise(err: icx::Error) -> PyErr {
    match &err {
        icx::Error::Io { .. } => PyIOError::new_err(err.to_string()),
        icx::Error::Training { .. } | icx::Error::NumericInput(_) => {
            PyRuntimeError::new_err(err.to_string())
        }
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// Flattens a list of equal-length rows into one row-major buffer, returning
/// the buffer and the row width.
fn flatten_rows(name: &str, rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 {
        return Err(PyValueError::new_err(format!(
            "{name} must be a non-empty list of non-empty rows"
        )));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!(
            "{name} rows must all have length {width}, found one of length {}",
            bad.len()
        )));
    }
    Ok((rows.concat(), width))
}

/// Splits a matrix tensor back into a list of rows.
fn nested_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

/// Builds an `[n x k]` tensor from probability rows.
fn probs_tensor(probs: &[Vec<f64>]) -> PyResult<Tensor> {
    let (data, width) = flatten_rows("probs", probs)?;
    Tensor::new(data, vec![probs.len(), width]).map_err(raise)
}

/// Class count to use when the caller does not pass one: one past the
/// largest context label, and never below the binary minimum.
fn resolve_classes(y_train: &[usize], n_classes: Option<usize>) -> usize {
    n_classes.unwrap_or_else(|| y_train.iter().map(|&y| y + 1).max().unwrap_or(0).max(2))
}

/// One early-exit inference outcome.
///
/// `probs` always comes from the decoder at `exit_layer`. `entropy_trace`
/// holds the raw mean query entropy in nats recorded at every evaluated
/// layer, including the layer that triggered the exit; its last value is
/// the one that fell below the threshold (or the final layer's entropy
/// when nothing did).
#[pyclass(frozen)]
struct Prediction {
    /// Predictive distribution per query row, rows summing to 1.
    #[pyo3(get)]
    probs: Vec<Vec<f64>>,
    /// Encoder layer whose decoder produced `probs`.
    #[pyo3(get)]
    exit_layer: usize,
    /// Depth of the model that ran, for reading `exit_layer` as a fraction.
    #[pyo3(get)]
    n_layers: usize,
    /// Mean query entropy in nats at each evaluated layer.
    #[pyo3(get)]
    entropy_trace: Vec<f64>,
    /// Number of decoder invocations the call spent.
    #[pyo3(get)]
    decode_count: usize,
    /// Wall-clock seconds for the whole inference call.
    #[pyo3(get)]
    elapsed_s: f64,
    /// Floating-point operations the forward pass and decodes cost.
    #[pyo3(get)]
    flops: u64,
}

impl Prediction {
    fn from_report(report: exit::ExitReport, n_layers: usize) -> Self {
        Prediction {
            probs: nested_rows(&report.probs),
            exit_layer: report.exit_layer,
            n_layers,
            entropy_trace: report.entropy_trace,
            decode_count: report.decode_count,
            elapsed_s: report.elapsed,
            flops: report.flops,
        }
    }
}

#[pymethods]
impl Prediction {
    /// Most probable class per query row, ties resolving to the lowest index.
    fn classes(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| {
                let mut best = 0usize;
                for (c, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Prediction(exit_layer={}/{}, rows={}, decode_count={}, flops={})",
            self.exit_layer,
            self.n_layers,
            self.probs.len(),
            self.decode_count,
            self.flops
        )
    }
}

/// A synthetic classification task drawn from the training prior, already
/// split into context (`x_train`, `y_train`) and query (`x_test`, `y_test`)
/// rows. Feature rows are `n_features` wide; labels lie in `0..n_classes`.
#[pyclass(frozen)]
struct Task {
    #[pyo3(get)]
    x_train: Vec<Vec<f64>>,
    #[pyo3(get)]
    y_train: Vec<usize>,
    #[pyo3(get)]
    x_test: Vec<Vec<f64>>,
    #[pyo3(get)]
    y_test: Vec<usize>,
    #[pyo3(get)]
    n_features: usize,
    #[pyo3(get)]
    n_classes: usize,
}

#[pymethods]
impl Task {
    fn __repr__(&self) -> String {
        format!(
            "Task(n_train={}, n_test={}, n_features={}, n_classes={})",
            self.x_train.len(),
            self.x_test.len(),
            self.n_features,
            self.n_classes
        )
    }
}

/// A trained backbone with one decoder per layer, ready for early-exit
/// inference on tasks of up to `max_features` features and `max_classes`
/// classes.
#[pyclass(frozen)]
struct Model {
    backbone: BackboneWeights,
    bank: DecoderBank,
}

impl Model {
    /// Validates and flattens Python-side task buffers, then runs `body`
    /// on the resulting borrowed task without holding the interpreter lock.
    fn with_task<T: Send>(
        &self,
        py: Python<'_>,
        x_train: Vec<Vec<f64>>,
        y_train: Vec<usize>,
        x_test: Vec<Vec<f64>>,
        n_classes: Option<usize>,
        body: impl FnOnce(&TaskInput) -> icx::Result<T> + Send,
    ) -> PyResult<T> {
        let (train_buf, train_width) = flatten_rows("x_train", &x_train)?;
        let (test_buf, test_width) = flatten_rows("x_test", &x_test)?;
        if train_width != test_width {
            return Err(PyValueError::new_err(format!(
                "x_train rows have {train_width} features, x_test rows have {test_width}"
            )));
        }
        let n_classes = resolve_classes(&y_train, n_classes);
        py.detach(move || {
            let task = TaskInput::new(&train_buf, &y_train, &test_buf, train_width, n_classes)?;
            body(&task)
        })
        .map_err(raise)
    }
}

#[pymethods]
impl Model {
    #[getter]
    fn d_model(&self) -> usize {
        self.backbone.config.d_model
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.backbone.config.n_layers
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.backbone.config.n_heads
    }

    #[getter]
    fn d_ff(&self) -> usize {
        self.backbone.config.d_ff
    }

    #[getter]
    fn max_features(&self) -> usize {
        self.backbone.config.max_features
    }

    #[getter]
    fn max_classes(&self) -> usize {
        self.backbone.config.max_classes
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.backbone.config.seed
    }

    /// Writes the backbone and decoder bank to `path`; `load` restores them
    /// bit for bit, as does the command-line tool.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.backbone, &self.bank).map_err(raise)
    }

    /// Runs early-exit inference on one task.
    ///
    /// `x_train` and `x_test` are lists of equal-length feature rows and
    /// `y_train` the context labels. When `n_classes` is omitted it is
    /// inferred as `max(y_train) + 1`, floored at 2. The forward pass stops
    /// at the first layer at or after `min_layer` whose mean query entropy
    /// falls strictly below `tau` nats (divided by `ln n_classes` first when
    /// `normalize_entropy` is set); `tau = 0` forces a full pass.
    #[pyo3(signature = (x_train, y_train, x_test, *, n_classes = None, tau = 0.0, normalize_entropy = false, min_layer = 1))]
    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        py: Python<'_>,
        x_train: Vec<Vec<f64>>,
        y_train: Vec<usize>,
        x_test: Vec<Vec<f64>>,
        n_classes: Option<usize>,
        tau: f64,
        normalize_entropy: bool,
        min_layer: usize,
    ) -> PyResult<Prediction> {
        let mut cfg = ExitConfig::with_tau(tau);
        cfg.normalize_entropy = normalize_entropy;
        cfg.min_layer = min_layer;
        let report = self.with_task(py, x_train, y_train, x_test, n_classes, |task| {
            exit::predict_early_exit(task, &self.backbone, &self.bank, &cfg)
        })?;
        Ok(Prediction::from_report(report, self.backbone.config.n_layers))
    }

    /// Decodes the query rows at one fixed layer, with no exit rule.
    ///
    /// An early exit at `layer` returns exactly these probabilities, so this
    /// is the reference to compare a truncated pass against.
    #[pyo3(signature = (x_train, y_train, x_test, layer, *, n_classes = None))]
    fn probabilities_at_layer(
        &self,
        py: Python<'_>,
        x_train: Vec<Vec<f64>>,
        y_train: Vec<usize>,
        x_test: Vec<Vec<f64>>,
        layer: usize,
        n_classes: Option<usize>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let probs = self.with_task(py, x_train, y_train, x_test, n_classes, |task| {
            exit::probabilities_at_layer(task, &self.backbone, &self.bank, layer)
        })?;
        Ok(nested_rows(&probs))
    }

    fn __repr__(&self) -> String {
        let c = &self.backbone.config;
        format!(
            "Model(d_model={}, n_layers={}, n_heads={}, d_ff={}, max_features={}, max_classes={}, seed={})",
            c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_features, c.max_classes, c.seed
        )
    }
}

/// Trains a backbone end to end with its final decoder, then one frozen
/// decoder per earlier layer, all on synthetic prior tasks. Defaults match
/// the library's; the result is deterministic given `seed`.
#[pyfunction]
#[pyo3(signature = (*,
    d_model = 64, n_layers = 6, n_heads = 4, d_ff = 256,
    max_features = 8, max_classes = 4, seed = 0,
    prior_samples = 128, train_fraction = 0.7, noise_std = 0.1,
    mlp_depth = (1, 3), mlp_width = (4, 16),
    backbone_steps = 2000, backbone_batch = 4, backbone_lr = 1e-3,
    decoder_epochs = 5, decoder_steps = 200, decoder_batch = 8, decoder_lr = 1e-3,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    d_ff: usize,
    max_features: usize,
    max_classes: usize,
    seed: u64,
    prior_samples: usize,
    train_fraction: f64,
    noise_std: f64,
    mlp_depth: (usize, usize),
    mlp_width: (usize, usize),
    backbone_steps: usize,
    backbone_batch: usize,
    backbone_lr: f64,
    decoder_epochs: usize,
    decoder_steps: usize,
    decoder_batch: usize,
    decoder_lr: f64,
) -> PyResult<Model> {
    let model = ModelConfig {
        d_model,
        n_layers,
        n_heads,
        d_ff,
        max_features,
        max_classes,
        seed,
    };
    let prior = PriorConfig {
        n_samples_per_task: prior_samples,
        max_features,
        max_classes,
        train_fraction,
        mlp_depth_range: mlp_depth,
        mlp_width_range: mlp_width,
        noise_std,
        seed,
    };
    let backbone_params = BackboneTrainParams {
        steps: backbone_steps,
        batch_size: backbone_batch,
        lr: backbone_lr,
    };
    let decoder_params = DecoderTrainParams {
        epochs: decoder_epochs,
        steps_per_epoch: decoder_steps,
        batch_size: decoder_batch,
        lr: decoder_lr,
    };
    let (backbone, bank) = py
        .detach(move || {
            let (backbone, final_decoder) = train_backbone(&model, &prior, &backbone_params)?;
            let bank = train_bank(&backbone, &final_decoder, &prior, &decoder_params)?;
            Ok::<_, icx::Error>((backbone, bank))
        })
        .map_err(raise)?;
    Ok(Model { backbone, bank })
}

/// Restores a model saved with `Model.save` or the command-line trainer.
#[pyfunction]
fn load(path: PathBuf) -> PyResult<Model> {
    let (backbone, bank) = load_checkpoint(&path).map_err(raise)?;
    Ok(Model { backbone, bank })
}

/// Draws one synthetic task from the prior stream. The same
/// `(seed, task_index)` pair always yields the same task; distinct indices
/// give independent tasks from the same prior. Indices at or above
/// `HOLDOUT_TASK_BASE` are never touched by training.
#[pyfunction]
#[pyo3(signature = (*,
    n_samples = 128, max_features = 8, max_classes = 4,
    train_fraction = 0.7, noise_std = 0.1,
    mlp_depth = (1, 3), mlp_width = (4, 16),
    seed = 0, task_index = 0,
))]
#[allow(clippy::too_many_arguments)]
fn sample_task(
    n_samples: usize,
    max_features: usize,
    max_classes: usize,
    train_fraction: f64,
    noise_std: f64,
    mlp_depth: (usize, usize),
    mlp_width: (usize, usize),
    seed: u64,
    task_index: u64,
) -> PyResult<Task> {
    let config = PriorConfig {
        n_samples_per_task: n_samples,
        max_features,
        max_classes,
        train_fraction,
        mlp_depth_range: mlp_depth,
        mlp_width_range: mlp_width,
        noise_std,
        seed,
    };
    let task = prior::sample_task(&config, task_index).map_err(raise)?;
    let rows = |buf: &[f64]| buf.chunks(task.n_features).map(<[f64]>::to_vec).collect();
    Ok(Task {
        x_train: rows(&task.x_train),
        x_test: rows(&task.x_test),
        y_train: task.y_train,
        y_test: task.y_test,
        n_features: task.n_features,
        n_classes: task.n_classes,
    })
}

/// Mean Shannon entropy of probability rows, in nats. Rows must be finite,
/// non-negative, and sum to 1 within tolerance.
#[pyfunction]
fn mean_entropy(probs: Vec<Vec<f64>>) -> PyResult<f64> {
    exit::mean_entropy(&probs_tensor(&probs)?).map_err(raise)
}

/// Fraction of rows whose most probable class matches the label, ties
/// resolving to the lowest class index.
#[pyfunction]
fn accuracy(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&probs_tensor(&probs)?, &labels).map_err(raise)
}

/// One-vs-rest ROC AUC averaged over the classes present in `labels`,
/// with tied scores sharing their average rank. `n_classes` defaults to
/// the width of `probs`.
#[pyfunction]
#[pyo3(signature = (probs, labels, n_classes = None))]
fn macro_auc(
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    n_classes: Option<usize>,
) -> PyResult<f64> {
    let scores = probs_tensor(&probs)?;
    let k = n_classes.unwrap_or_else(|| scores.cols());
    metrics::macro_auc(&scores, &labels, k).map_err(raise)
}

#[pymodule]
fn icx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Prediction>()?;
    m.add_class::<Task>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load, m)?)?;
    m.add_function(wrap_pyfunction!(sample_task, m)?)?;
    m.add_function(wrap_pyfunction!(mean_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(macro_auc, m)?)?;
    m.add("HOLDOUT_TASK_BASE", prior::HOLDOUT_TASK_BASE)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
