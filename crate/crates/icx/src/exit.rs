//! Entropy-gated early-exit inference.
//!
//! The layered forward pass is evaluated one encoder layer at a time; after
//! each layer (from `min_layer` on) the layer's decoder predicts the query
//! rows and the mean predictive entropy is compared against the threshold
//! `tau`. The first layer whose entropy falls strictly below `tau` ends the
//! pass. Because truncated forwards are bit-exact prefixes of full ones,
//! exiting early changes cost and never values.

use std::time::Instant;

use crate::backbone::{BackboneWeights, ModelConfig, TaskInput};
use crate::decoder::DecoderBank;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Early-exit policy settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitConfig {
    /// Entropy threshold in nats; 0 disables early exit (comparison is
    /// strict and entropy is never negative).
    pub tau: f64,
    pub policy: ExitPolicy,
    /// When true, compare `H / ln K` against `tau` instead of raw `H`,
    /// making thresholds comparable across class counts. The recorded
    /// entropy trace stays in raw nats either way.
    pub normalize_entropy: bool,
    /// Earliest layer allowed to exit (1-based).
    pub min_layer: usize,
}

/// How per-row entropies decide the exit. The whole query batch exits
/// together on its mean entropy; the enum exists so a different aggregation
/// could be added without changing call sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitPolicy {
    BatchMean,
}

impl Default for ExitConfig {
    fn default() -> Self {
        ExitConfig {
            tau: 0.0,
            policy: ExitPolicy::BatchMean,
            normalize_entropy: false,
            min_layer: 1,
        }
    }
}

impl ExitConfig {
    pub fn with_tau(tau: f64) -> Self {
        ExitConfig { tau, ..ExitConfig::default() }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::Config(format!(
                "exit.tau must be non-negative, got {}",
                self.tau
            )));
        }
        if self.min_layer == 0 || self.min_layer > n_layers {
            return Err(Error::Config(format!(
                "exit.min_layer must lie in 1..={n_layers}, got {}",
                self.min_layer
            )));
        }
        Ok(())
    }
}

/// Outcome of one early-exit inference call.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitReport {
    /// `[n_test x n_classes]` predictive distribution from the decoder at
    /// `exit_layer`; rows sum to 1 within 1e-9.
    pub probs: Tensor,
    /// Layer whose decoder produced `probs`, in `[min_layer, n_layers]`.
    pub exit_layer: usize,
    /// Mean query entropy (raw nats) at each evaluated layer, i.e. layers
    /// `min_layer..=exit_layer`.
    pub entropy_trace: Vec<f64>,
    /// Decoder invocations made; equals `entropy_trace.len()`.
    pub decode_count: usize,
    /// Wall-clock seconds for the whole inference call.
    pub elapsed: f64,
    /// FLOPs charged on the inference tape (embedding, encoder layers,
    /// decodes, softmax); the off-tape entropy reduction is not counted.
    pub flops: u64,
}

/// Mean per-row entropy of a probability matrix in nats, with the convention
/// `0 * ln 0 = 0`. Rows must be distributions: entries non-negative and sums
/// within 1e-6 of 1.
pub fn mean_entropy(probs: &Tensor) -> Result<f64> {
    if probs.rank() != 2 || probs.rows() == 0 {
        return Err(Error::Contract(
            "mean_entropy needs a non-empty probability matrix".into(),
        ));
    }
    let cols = probs.cols();
    let mut total = 0.0;
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let mut sum = 0.0;
        let mut h = 0.0;
        for &p in row {
            if p < 0.0 || !p.is_finite() {
                return Err(Error::Contract(format!(
                    "mean_entropy: row {r} holds non-probability entry {p}"
                )));
            }
            sum += p;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "mean_entropy: row {r} sums to {sum}, not a distribution over {cols} classes"
            )));
        }
        total += h;
    }
    Ok(total / probs.rows() as f64)
}

/// Runs the early-exit forward pass of `task` through `backbone` with one
/// decoder per layer from `bank`.
///
/// For each layer `i = 1..=n_layers`: apply the layer; once `i >=
/// cfg.min_layer`, decode the query rows with decoder `i`, softmax, record
/// the mean entropy, and stop if it is strictly below `cfg.tau`. If no layer
/// triggers, the final layer's decoder output is returned with `exit_layer =
/// n_layers`.
pub fn predict_early_exit(
    task: &TaskInput,
    backbone: &BackboneWeights,
    bank: &DecoderBank,
    cfg: &ExitConfig,
) -> Result<ExitReport> {
    let start = Instant::now();
    let n_layers = backbone.config.n_layers;
    cfg.validate(n_layers)?;
    if bank.n_layers() != n_layers {
        return Err(Error::Contract(format!(
            "bank holds {} decoders for a {}-layer backbone",
            bank.n_layers(),
            n_layers
        )));
    }
    backbone.check_capacity(task)?;

    let mut tape = Tape::inference();
    let emb = backbone.register_embed(&mut tape, false);
    let mut x = backbone.embed_on(&mut tape, &emb, task)?;
    let ln_k = (task.n_classes as f64).ln();
    let mut trace = Vec::new();

    for layer in 1..=n_layers {
        let reg = backbone.register_layer(&mut tape, layer - 1, false);
        x = backbone.layer_on(&mut tape, &reg, x, task.n_train)?;
        if layer < cfg.min_layer {
            continue;
        }
        let decoder = bank.for_layer(layer)?;
        let dec_reg = decoder.register(&mut tape, false);
        let test_tokens = tape.slice_rows(x, task.n_train, task.n_test)?;
        let logits = decoder.decode_on(&mut tape, &dec_reg, test_tokens, task.n_classes)?;
        let probs_id = tape.softmax(logits)?;
        let entropy = mean_entropy(tape.value(probs_id))?;
        trace.push(entropy);
        let ExitPolicy::BatchMean = cfg.policy;
        let confidence = if cfg.normalize_entropy { entropy / ln_k } else { entropy };
        if confidence < cfg.tau || layer == n_layers {
            return Ok(ExitReport {
                probs: tape.value(probs_id).clone(),
                exit_layer: layer,
                decode_count: trace.len(),
                entropy_trace: trace,
                elapsed: start.elapsed().as_secs_f64(),
                flops: tape.flops(),
            });
        }
    }
    unreachable!("the final layer always returns")
}

/// Reference pipeline without the exit loop: forward pass truncated after
/// `layer`, decoded with that layer's head, softmaxed. Early exits at
/// `layer` return these probabilities bit for bit, because both paths run
/// the same kernels in the same order.
pub fn probabilities_at_layer(
    task: &TaskInput,
    backbone: &BackboneWeights,
    bank: &DecoderBank,
    layer: usize,
) -> Result<Tensor> {
    let acts = crate::backbone::forward_until(task, backbone, layer)?;
    let logits =
        crate::decoder::decode(&acts, bank.for_layer(layer)?, task.n_test, task.n_classes)?;
    Tensor::new(
        crate::tape::softmax_rows(logits.data(), task.n_test, task.n_classes),
        vec![task.n_test, task.n_classes],
    )
}

/// Analytic FLOP count for an early-exit inference that ran `exit_layer`
/// encoder layers and decoded at layers `cfg.min_layer..=exit_layer`,
/// mirroring the tape's conventions term by term (1 FLOP per arithmetic
/// operation or comparison, 4 per transcendental call; the off-tape entropy
/// reduction is excluded on both sides).
pub fn count_flops(
    task: &TaskInput,
    model: &ModelConfig,
    cfg: &ExitConfig,
    exit_layer: usize,
) -> Result<u64> {
    cfg.validate(model.n_layers)?;
    if exit_layer < cfg.min_layer || exit_layer > model.n_layers {
        return Err(Error::Contract(format!(
            "exit_layer {exit_layer} outside {}..={}",
            cfg.min_layer, model.n_layers
        )));
    }
    let decodes = (exit_layer - cfg.min_layer + 1) as u64;
    Ok(embed_flops(task, model)
        + exit_layer as u64 * layer_flops(task, model)
        + decodes * decode_flops(task, model))
}

/// Embedding cost: feature projection over the zero-padded width, its bias,
/// and the label-embedding add (the gather itself is free).
pub(crate) fn embed_flops(task: &TaskInput, model: &ModelConfig) -> u64 {
    let t = task.rows() as u64;
    let f = model.max_features as u64;
    let d = model.d_model as u64;
    2 * t * f * d + t * d + t * d
}

/// One encoder layer: two layer norms, four projections with biases, masked
/// attention over the context-visibility pattern, the feed-forward pair with
/// GELU, and two residual adds.
pub(crate) fn layer_flops(task: &TaskInput, model: &ModelConfig) -> u64 {
    let t = task.rows() as u64;
    let d = model.d_model as u64;
    let ff = model.d_ff as u64;
    let heads = model.n_heads as u64;
    let dh = d / heads;
    let n_train = task.n_train as u64;
    let n_test = task.n_test as u64;
    let attended_pairs = n_train * n_train + n_test * (n_train + 1);

    let layer_norms = 2 * t * (7 * d + 12);
    let projections = 4 * (2 * t * d * d) + 4 * (t * d);
    let attention = heads * attended_pairs * (4 * dh + 8);
    let residuals = 2 * (t * d);
    let ffn = 2 * t * d * ff + t * ff + 12 * (t * ff) + 2 * t * ff * d + t * d;
    layer_norms + projections + attention + residuals + ffn
}

/// One decode: the hidden affine with GELU, the output affine at full
/// `max_classes` width (then a free column slice), and the softmax.
pub(crate) fn decode_flops(task: &TaskInput, model: &ModelConfig) -> u64 {
    let n = task.n_test as u64;
    let d = model.d_model as u64;
    let dh = model.d_hidden() as u64;
    let kmax = model.max_classes as u64;
    let k = task.n_classes as u64;
    let hidden = 2 * n * d * dh + n * dh + 12 * (n * dh);
    let output = 2 * n * dh * kmax + n * kmax;
    let softmax = 8 * n * k;
    hidden + output + softmax
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{train_backbone, BackboneTrainParams};
    use crate::decoder::{DecoderBank, DecoderWeights};
    use crate::prior::{sample_task, PriorConfig, SyntheticTask};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            d_ff: 32,
            max_features: 4,
            max_classes: 3,
            seed: 21,
        }
    }

    fn tiny_prior() -> PriorConfig {
        PriorConfig {
            n_samples_per_task: 32,
            max_features: 4,
            max_classes: 3,
            seed: 21,
            ..PriorConfig::default()
        }
    }

    fn init_bank(cfg: &ModelConfig) -> DecoderBank {
        DecoderBank::new(
            (1..=cfg.n_layers)
                .map(|l| DecoderWeights::init(cfg, l))
                .collect(),
        )
        .unwrap()
    }

    /// Reference pipeline: full forward to `layer`, dedicated decode, softmax.
    fn probs_at_layer(
        task: &SyntheticTask,
        backbone: &BackboneWeights,
        bank: &DecoderBank,
        layer: usize,
    ) -> Tensor {
        probabilities_at_layer(&TaskInput::from(task), backbone, bank, layer).unwrap()
    }

    #[test]
    fn entropy_of_one_hot_rows_is_zero() {
        let probs = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0], vec![2, 3]).unwrap();
        assert_eq!(mean_entropy(&probs).unwrap(), 0.0);
    }

    #[test]
    fn entropy_of_uniform_rows_is_ln_k() {
        for k in [2usize, 3, 4] {
            let probs = Tensor::filled(vec![3, k], 1.0 / k as f64);
            let h = mean_entropy(&probs).unwrap();
            assert!(
                (h - (k as f64).ln()).abs() < 1e-12,
                "K={k}: {h} vs {}",
                (k as f64).ln()
            );
        }
    }

    #[test]
    fn entropy_matches_worked_two_row_example() {
        let probs = Tensor::new(vec![0.9, 0.1, 0.5, 0.5], vec![2, 2]).unwrap();
        let h = mean_entropy(&probs).unwrap();
        assert!((h - 0.509_115_076_975_696_8).abs() < 1e-12);
        assert!((h - 0.509115).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_non_distributions() {
        let bad_sum = Tensor::new(vec![0.9, 0.2], vec![1, 2]).unwrap();
        assert!(matches!(mean_entropy(&bad_sum), Err(Error::Contract(_))));
        let negative = Tensor::new(vec![1.1, -0.1], vec![1, 2]).unwrap();
        assert!(matches!(mean_entropy(&negative), Err(Error::Contract(_))));
        let nan = Tensor::new(vec![f64::NAN, 1.0], vec![1, 2]).unwrap();
        assert!(matches!(mean_entropy(&nan), Err(Error::Contract(_))));
        let vector = Tensor::vector(vec![1.0]);
        assert!(mean_entropy(&vector).is_err());
    }

    #[test]
    fn tau_zero_runs_the_full_stack_and_matches_the_plain_pipeline() {
        let cfg = tiny_config();
        let backbone = BackboneWeights::init(&cfg).unwrap();
        let bank = init_bank(&cfg);
        let task = sample_task(&tiny_prior(), 0).unwrap();
        let report =
            predict_early_exit(&TaskInput::from(&task), &backbone, &bank, &ExitConfig::with_tau(0.0))
                .unwrap();
        assert_eq!(report.exit_layer, cfg.n_layers);
        assert_eq!(report.decode_count, cfg.n_layers);
        assert_eq!(report.entropy_trace.len(), cfg.n_layers);
        let reference = probs_at_layer(&task, &backbone, &bank, cfg.n_layers);
        assert_eq!(report.probs, reference);
        for row in 0..report.probs.rows() {
            let sum: f64 = report.probs.row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn huge_tau_exits_at_min_layer() {
        let cfg = tiny_config();
        let backbone = BackboneWeights::init(&cfg).unwrap();
        let bank = init_bank(&cfg);
        let task = sample_task(&tiny_prior(), 1).unwrap();
        let input = TaskInput::from(&task);
        let report =
            predict_early_exit(&input, &backbone, &bank, &ExitConfig::with_tau(1e9)).unwrap();
        assert_eq!(report.exit_layer, 1);
        assert_eq!(report.decode_count, 1);
        assert_eq!(report.probs, probs_at_layer(&task, &backbone, &bank, 1));

        let floored = ExitConfig {
            tau: 1e9,
            min_layer: 3,
            ..ExitConfig::default()
        };
        let report = predict_early_exit(&input, &backbone, &bank, &floored).unwrap();
        assert_eq!(report.exit_layer, 3);
        assert_eq!(report.decode_count, 1);
        assert_eq!(report.entropy_trace.len(), 1);
        assert_eq!(report.probs, probs_at_layer(&task, &backbone, &bank, 3));
    }

    #[test]
    fn trace_replay_predicts_exits_exactly() {
        let cfg = tiny_config();
        let backbone = BackboneWeights::init(&cfg).unwrap();
        let bank = init_bank(&cfg);
        for index in 0..6u64 {
            let task = sample_task(&tiny_prior(), index).unwrap();
            let input = TaskInput::from(&task);
            let full = predict_early_exit(&input, &backbone, &bank, &ExitConfig::with_tau(0.0))
                .unwrap();
            let trace = &full.entropy_trace;
            let eps = 1e-9;
            let mut taus = vec![0.0];
            taus.extend(trace.iter().flat_map(|h| [h - eps, h + eps]));
            for tau in taus {
                let expected_layer = trace
                    .iter()
                    .position(|&h| h < tau)
                    .map(|j| j + 1)
                    .unwrap_or(cfg.n_layers);
                let report =
                    predict_early_exit(&input, &backbone, &bank, &ExitConfig::with_tau(tau))
                        .unwrap();
                assert_eq!(
                    report.exit_layer, expected_layer,
                    "task {index}, tau {tau}: trace {trace:?}"
                );
                assert_eq!(
                    report.probs,
                    probs_at_layer(&task, &backbone, &bank, expected_layer),
                    "early exit must be value-identical to the truncated pipeline"
                );
                assert_eq!(&trace[..report.entropy_trace.len()], &report.entropy_trace[..]);
                assert_eq!(report.decode_count, report.exit_layer);
            }
        }
    }

    #[test]
    fn exit_layer_is_monotone_in_tau_and_traces_stay_bounded() {
        let cfg = tiny_config();
        let backbone = BackboneWeights::init(&cfg).unwrap();
        let bank = init_bank(&cfg);
        let grid = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.8, 1.2];
        for index in 10..25u64 {
            let task = sample_task(&tiny_prior(), index).unwrap();
            let input = TaskInput::from(&task);
            let ln_k = (task.n_classes as f64).ln();
            let mut last_exit = usize::MAX;
            for tau in grid {
                let report =
                    predict_early_exit(&input, &backbone, &bank, &ExitConfig::with_tau(tau))
                        .unwrap();
                assert!(
                    report.exit_layer <= last_exit,
                    "task {index}: exit layer rose from {last_exit} to {} as tau grew to {tau}",
                    report.exit_layer
                );
                last_exit = report.exit_layer;
                for &h in &report.entropy_trace {
                    assert!(h >= 0.0 && h <= ln_k + 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalized_comparison_exits_no_later_and_keeps_raw_trace() {
        let cfg = tiny_config();
        let backbone = BackboneWeights::init(&cfg).unwrap();
        let bank = init_bank(&cfg);
        for index in [2u64, 5, 11] {
            let task = sample_task(&tiny_prior(), index).unwrap();
            if task.n_classes < 2 {
                continue;
            }
            let input = TaskInput::from(&task);
            let tau = 0.9;
            let raw = predict_early_exit(&input, &backbone, &bank, &ExitConfig::with_tau(tau))
                .unwrap();
            let normalized = predict_early_exit(
                &input,
                &backbone,
                &bank,
                &ExitConfig {
                    tau,
                    normalize_entropy: true,
                    ..ExitConfig::default()
                },
            )
            .unwrap();
            let ln_k = (task.n_classes as f64).ln();
            if ln_k > 1.0 {
                assert!(
                    normalized.exit_layer <= raw.exit_layer,
                    "dividing by ln K > 1 shrinks the comparison value"
                );
            } else {
                assert!(
                    normalized.exit_layer >= raw.exit_layer,
                    "dividing by ln K < 1 inflates the comparison value"
                );
            }
            let shorter = normalized.entropy_trace.len().min(raw.entropy_trace.len());
            assert_eq!(
                &raw.entropy_trace[..shorter],
                &normalized.entropy_trace[..shorter],
                "the recorded trace stays in raw nats"
            );
        }
    }

    #[test]
    fn measured_flops_equal_the_analytic_count() {
        let cfg = tiny_config();
        let backbone = BackboneWeights::init(&cfg).unwrap();
        let bank = init_bank(&cfg);
        let task = sample_task(&tiny_prior(), 3).unwrap();
        let input = TaskInput::from(&task);
        for exit_cfg in [
            ExitConfig::with_tau(0.0),
            ExitConfig::with_tau(1e9),
            ExitConfig {
                tau: 1e9,
                min_layer: 2,
                ..ExitConfig::default()
            },
            ExitConfig {
                tau: 0.35,
                ..ExitConfig::default()
            },
        ] {
            let report = predict_early_exit(&input, &backbone, &bank, &exit_cfg).unwrap();
            let analytic = count_flops(&input, &cfg, &exit_cfg, report.exit_layer).unwrap();
            assert_eq!(
                report.flops, analytic,
                "measured and analytic FLOPs must agree (exit at {})",
                report.exit_layer
            );
        }
    }

    #[test]
    fn analytic_flops_grow_strictly_and_halve_with_depth() {
        let cfg = ModelConfig::default();
        let x_train = vec![0.0; 90 * cfg.max_features];
        let y_train: Vec<usize> = (0..90).map(|i| i % 2).collect();
        let x_test = vec![0.0; 38 * cfg.max_features];
        let input = TaskInput::new(&x_train, &y_train, &x_test, cfg.max_features, 2).unwrap();
        let exit_cfg = ExitConfig::default();
        let mut last = 0;
        for layer in 1..=cfg.n_layers {
            let f = count_flops(&input, &cfg, &exit_cfg, layer).unwrap();
            assert!(f > last);
            last = f;
        }
        let half_layers = cfg.n_layers / 2;
        let encoder_half = half_layers as u64 * layer_flops(&input, &cfg);
        let encoder_full = cfg.n_layers as u64 * layer_flops(&input, &cfg);
        assert_eq!(encoder_half * 2, encoder_full);

        let at_n = count_flops(
            &input,
            &cfg,
            &ExitConfig {
                min_layer: cfg.n_layers,
                ..ExitConfig::default()
            },
            cfg.n_layers,
        )
        .unwrap();
        assert_eq!(
            at_n,
            embed_flops(&input, &cfg) + encoder_full + decode_flops(&input, &cfg)
        );
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let cfg = tiny_config();
        assert!(ExitConfig::with_tau(-0.1).validate(cfg.n_layers).is_err());
        assert!(ExitConfig::with_tau(f64::NAN).validate(cfg.n_layers).is_err());
        let zero_floor = ExitConfig { min_layer: 0, ..ExitConfig::default() };
        assert!(zero_floor.validate(cfg.n_layers).is_err());
        let deep_floor = ExitConfig { min_layer: cfg.n_layers + 1, ..ExitConfig::default() };
        assert!(deep_floor.validate(cfg.n_layers).is_err());

        let backbone = BackboneWeights::init(&cfg).unwrap();
        let short_bank = DecoderBank::new(
            (1..cfg.n_layers)
                .map(|l| DecoderWeights::init(&cfg, l))
                .collect(),
        )
        .unwrap();
        let task = sample_task(&tiny_prior(), 0).unwrap();
        assert!(matches!(
            predict_early_exit(
                &TaskInput::from(&task),
                &backbone,
                &short_bank,
                &ExitConfig::default()
            ),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn trained_stack_exits_earlier_once_confident() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            d_ff: 32,
            max_features: 4,
            max_classes: 3,
            seed: 33,
        };
        let prior = PriorConfig {
            n_samples_per_task: 32,
            max_features: 4,
            max_classes: 3,
            seed: 33,
            ..PriorConfig::default()
        };
        let (backbone, final_dec) = train_backbone(
            &cfg,
            &prior,
            &BackboneTrainParams {
                steps: 120,
                batch_size: 4,
                lr: 1e-3,
            },
        )
        .unwrap();
        let bank = crate::decoder::train_bank(
            &backbone,
            &final_dec,
            &prior,
            &crate::decoder::DecoderTrainParams {
                epochs: 1,
                steps_per_epoch: 60,
                batch_size: 4,
                lr: 3e-3,
            },
        )
        .unwrap();
        let task = sample_task(&prior, 1 << 20).unwrap();
        let input = TaskInput::from(&task);
        let full = predict_early_exit(&input, &backbone, &bank, &ExitConfig::with_tau(0.0))
            .unwrap();
        let loose = predict_early_exit(
            &input,
            &backbone,
            &bank,
            &ExitConfig::with_tau((task.n_classes as f64).ln()),
        )
        .unwrap();
        assert!(loose.exit_layer <= full.exit_layer);
        assert!(loose.flops <= full.flops);
    }
}
