//! Synthetic classification task generator.
//!
//! Pretraining never sees real data: it consumes an endless, seeded stream of
//! small tabular tasks. Each task is produced by a freshly drawn random MLP
//! that maps latent rows to a scalar score; quantile thresholds on the score
//! turn it into a K-class labeling, and the observed features are the latents
//! plus Gaussian noise. Tasks are a pure function of `(seed, task_index)`, so
//! any point in the stream can be regenerated in O(1) without producing its
//! predecessors.

use crate::error::{Error, Result};
use crate::rng::Pcg32;

/// Full-scale generation settings, kept for reference; the working defaults
/// below are deliberately smaller so everything runs on one desk CPU.
pub const FULL_SCALE_SAMPLES_PER_TASK: usize = 1152;
pub const FULL_SCALE_MAX_FEATURES: usize = 100;
pub const FULL_SCALE_MAX_CLASSES: usize = 10;

/// Offset added to the task index when a draw has to be regenerated; large
/// enough that offset indices never collide with ordinary stream positions.
const REGEN_STRIDE: u64 = 1 << 40;

/// First task index reserved for held-out evaluation. Training streams use
/// low indices, so tasks at or above this base are never trained on.
pub const HOLDOUT_TASK_BASE: u64 = 1 << 48;

/// Settings for the synthetic task distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    /// Rows per task before the train/test split.
    pub n_samples_per_task: usize,
    /// Feature count is drawn uniformly from `1..=max_features`.
    pub max_features: usize,
    /// Class count is drawn uniformly from `2..=max_classes`.
    pub max_classes: usize,
    /// Fraction of rows used as labeled context, in (0, 1).
    pub train_fraction: f64,
    /// Hidden-layer count range (inclusive) of the scoring MLP.
    pub mlp_depth_range: (usize, usize),
    /// Hidden-layer width range (inclusive) of the scoring MLP.
    pub mlp_width_range: (usize, usize),
    /// Standard deviation of the observation noise added to latents.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            n_samples_per_task: 128,
            max_features: 8,
            max_classes: 4,
            train_fraction: 0.7,
            mlp_depth_range: (1, 3),
            mlp_width_range: (4, 16),
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_classes < 2 {
            return Err(Error::Config(format!(
                "prior.max_classes must be at least 2, got {}",
                self.max_classes
            )));
        }
        if self.max_features < 1 {
            return Err(Error::Config("prior.max_features must be at least 1".into()));
        }
        if self.n_samples_per_task < 4 {
            return Err(Error::Config(format!(
                "prior.n_samples_per_task must be at least 4, got {}",
                self.n_samples_per_task
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "prior.train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.train_fraction * (self.n_samples_per_task as f64) < self.max_classes as f64 {
            return Err(Error::Config(
                "prior.train_fraction * n_samples_per_task must be at least max_classes".into(),
            ));
        }
        if self.mlp_depth_range.0 < 1 || self.mlp_depth_range.0 > self.mlp_depth_range.1 {
            return Err(Error::Config(format!(
                "prior.mlp_depth_range {:?} is not a valid range",
                self.mlp_depth_range
            )));
        }
        if self.mlp_width_range.0 < 1 || self.mlp_width_range.0 > self.mlp_width_range.1 {
            return Err(Error::Config(format!(
                "prior.mlp_width_range {:?} is not a valid range",
                self.mlp_width_range
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "prior.noise_std must be a finite non-negative float, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Number of context rows in a generated task.
    pub fn n_train(&self) -> usize {
        let n = self.n_samples_per_task;
        ((self.train_fraction * n as f64).floor() as usize).clamp(1, n - 1)
    }
}

/// One synthetic classification task, already split and standardized.
///
/// Feature matrices are row-major `[rows x n_features]`, z-scored with the
/// train-split statistics. `scores` keeps the pre-threshold MLP output per
/// row (train rows first, then test rows) so the quantile labeling can be
/// re-derived when debugging.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub x_train: Vec<f64>,
    pub y_train: Vec<usize>,
    pub x_test: Vec<f64>,
    pub y_test: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub scores: Vec<f64>,
}

impl SyntheticTask {
    /// Checks the structural invariants every generated task satisfies.
    pub fn validate(&self) -> Result<()> {
        let f = self.n_features;
        if self.x_train.len() != self.n_train * f
            || self.x_test.len() != self.n_test * f
            || self.y_train.len() != self.n_train
            || self.y_test.len() != self.n_test
            || self.scores.len() != self.n_train + self.n_test
        {
            return Err(Error::Contract("task buffer sizes are inconsistent".into()));
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_classes < 2 {
            return Err(Error::Contract("task is degenerate".into()));
        }
        if self
            .y_train
            .iter()
            .chain(&self.y_test)
            .any(|&y| y >= self.n_classes)
        {
            return Err(Error::Contract("label outside 0..n_classes".into()));
        }
        for class in 0..self.n_classes {
            if !self.y_train.contains(&class) {
                return Err(Error::Contract(format!(
                    "class {class} missing from the train split"
                )));
            }
        }
        if self.x_train.iter().chain(&self.x_test).any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// A scoring MLP: alternating affine layers and tanh, final layer affine to a
/// scalar. Weight matrices are `[out x in]` row-major.
struct ScoringMlp {
    layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
}

impl ScoringMlp {
    fn draw(rng: &mut Pcg32, input_dim: usize, widths: &[usize]) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(widths);
        dims.push(1);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| rng.normal_scaled(0.0, std))
                .collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.normal_scaled(0.0, std)).collect();
            layers.push((w, b, fan_in, fan_out));
        }
        ScoringMlp { layers }
    }

    fn score(&self, row: &[f64]) -> f64 {
        let mut current = row.to_vec();
        let last = self.layers.len() - 1;
        for (li, (w, b, fan_in, fan_out)) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; *fan_out];
            for o in 0..*fan_out {
                let mut acc = b[o];
                for i in 0..*fan_in {
                    acc += w[o * fan_in + i] * current[i];
                }
                next[o] = if li < last { acc.tanh() } else { acc };
            }
            current = next;
        }
        current[0]
    }
}

/// Draws task `task_index` from the distribution described by `config`.
///
/// Deterministic in `(config.seed, task_index)`. Procedure: draw the feature
/// count, class count, and MLP shape; draw latent rows from a standard
/// normal; score them with the MLP; place class boundaries at the empirical
/// K-quantiles of the scores; add observation noise to the latents to form
/// the features; shuffle and split; z-score by train statistics. If some
/// class never shows up in the train split, the shuffle is retried up to 100
/// times, after which the whole task is regenerated at an offset index.
pub fn sample_task(config: &PriorConfig, task_index: u64) -> Result<SyntheticTask> {
    config.validate()?;
    for regen in 0..64u64 {
        let key = task_index.wrapping_add(regen.wrapping_mul(REGEN_STRIDE));
        let mut rng = Pcg32::keyed(config.seed, key);
        if let Some(task) = try_generate(config, &mut rng) {
            return Ok(task);
        }
    }
    Err(Error::Contract(format!(
        "task {task_index}: no valid class assignment after 64 regenerations"
    )))
}

fn try_generate(config: &PriorConfig, rng: &mut Pcg32) -> Option<SyntheticTask> {
    let n = config.n_samples_per_task;
    let f = rng.usize_in(1, config.max_features);
    let k = rng.usize_in(2, config.max_classes);
    let depth = rng.usize_in(config.mlp_depth_range.0, config.mlp_depth_range.1);
    let widths: Vec<usize> = (0..depth)
        .map(|_| rng.usize_in(config.mlp_width_range.0, config.mlp_width_range.1))
        .collect();
    let mlp = ScoringMlp::draw(rng, f, &widths);

    let latents: Vec<f64> = (0..n * f).map(|_| rng.normal()).collect();
    let features: Vec<f64> = latents
        .iter()
        .map(|&z| z + config.noise_std * rng.normal())
        .collect();
    let scores: Vec<f64> = (0..n).map(|r| mlp.score(&latents[r * f..(r + 1) * f])).collect();
    let labels = quantile_labels(&scores, k);

    let n_train = config.n_train();
    let mut perm: Vec<usize> = (0..n).collect();
    for _attempt in 0..100 {
        rng.shuffle(&mut perm);
        let mut seen = vec![false; k];
        for &row in &perm[..n_train] {
            seen[labels[row]] = true;
        }
        if seen.iter().all(|&s| s) {
            return Some(assemble(config, f, k, n_train, &perm, &features, &labels, &scores));
        }
    }
    None
}

/// Class boundaries at the empirical K-quantiles: thresholds are the sorted
/// scores at ranks `i*n/K`, and a row's label is the number of thresholds at
/// or below its score.
pub fn quantile_labels(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    let thresholds: Vec<f64> = (1..k).map(|i| sorted[i * n / k]).collect();
    scores
        .iter()
        .map(|&s| thresholds.iter().filter(|&&t| t <= s).count())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    config: &PriorConfig,
    f: usize,
    k: usize,
    n_train: usize,
    perm: &[usize],
    features: &[f64],
    labels: &[usize],
    scores: &[f64],
) -> SyntheticTask {
    let n = config.n_samples_per_task;
    let n_test = n - n_train;
    let mut x = Vec::with_capacity(n * f);
    let mut y = Vec::with_capacity(n);
    let mut score_out = Vec::with_capacity(n);
    for &row in perm {
        x.extend_from_slice(&features[row * f..(row + 1) * f]);
        y.push(labels[row]);
        score_out.push(scores[row]);
    }

    // Standardize with train-split statistics (biased variance, degenerate
    // columns left centered).
    for col in 0..f {
        let mut mean = 0.0;
        for r in 0..n_train {
            mean += x[r * f + col];
        }
        mean /= n_train as f64;
        let mut var = 0.0;
        for r in 0..n_train {
            let d = x[r * f + col] - mean;
            var += d * d;
        }
        var /= n_train as f64;
        let std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        for r in 0..n {
            x[r * f + col] = (x[r * f + col] - mean) / std;
        }
    }

    SyntheticTask {
        x_train: x[..n_train * f].to_vec(),
        y_train: y[..n_train].to_vec(),
        x_test: x[n_train * f..].to_vec(),
        y_test: y[n_train..].to_vec(),
        n_train,
        n_test,
        n_features: f,
        n_classes: k,
        scores: score_out,
    }
}

/// Lazily yields tasks `start..start+count`; identical to calling
/// [`sample_task`] for each index.
pub fn task_stream(
    config: &PriorConfig,
    start: u64,
    count: u64,
) -> impl Iterator<Item = Result<SyntheticTask>> + '_ {
    (start..start.saturating_add(count)).map(move |i| sample_task(config, i))
}
