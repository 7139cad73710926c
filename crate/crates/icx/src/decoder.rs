//! Per-layer classification heads.
//!
//! A decoder is a two-layer MLP (affine, GELU, affine) that maps one encoder
//! layer's query-row activations to class logits. The final layer's decoder is
//! trained jointly with the backbone; every earlier layer gets its own head
//! trained afterwards with the backbone frozen, so adding early exits never
//! changes what the full-depth model computes.

use crate::backbone::{embed, encode_layer, forward_until, BackboneWeights, LayerActivations, ModelConfig, TaskInput};
use crate::error::{Error, Result};
use crate::metrics;
use crate::optim::Adam;
use crate::prior::{sample_task, PriorConfig};
use crate::rng::Pcg32;
use crate::tape::{softmax_rows, NodeId, Tape};
use crate::tensor::Tensor;

/// Full-scale decoder training schedule, kept for reference; the desk
/// defaults below fit a single CPU.
pub const FULL_SCALE_EPOCHS: usize = 100;
pub const FULL_SCALE_STEPS_PER_EPOCH: usize = 1024;
pub const FULL_SCALE_BATCH_SIZE: usize = 8;
pub const FULL_SCALE_LR: f64 = 3e-5;

/// One classification head bound to a specific encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// Encoder layer whose activations this head reads (1-based; the final
    /// layer's head has `layer_index == n_layers`).
    pub layer_index: usize,
    /// `[d_model x d_hidden]` and `[d_hidden]`.
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    /// `[d_hidden x max_classes]` and `[max_classes]`; tasks with fewer
    /// classes read only the first columns.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub(crate) struct TapedDecoder {
    hidden_w: NodeId,
    hidden_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

impl TapedDecoder {
    pub(crate) fn parameter_ids(&self) -> Vec<NodeId> {
        vec![self.hidden_w, self.hidden_b, self.out_w, self.out_b]
    }
}

impl DecoderWeights {
    /// Seeded initialization, distinct per layer: weights Normal(0, 0.02),
    /// biases zero.
    pub fn init(config: &ModelConfig, layer_index: usize) -> Self {
        let mut rng = Pcg32::keyed(config.seed, 0xDEC0_0000 + layer_index as u64);
        let d = config.d_model;
        let dh = config.d_hidden();
        let hidden_w = Tensor::from_fn(d, dh, |_, _| rng.normal_scaled(0.0, 0.02));
        let out_w = Tensor::from_fn(dh, config.max_classes, |_, _| rng.normal_scaled(0.0, 0.02));
        DecoderWeights {
            layer_index,
            hidden_w,
            hidden_b: Tensor::zeros(vec![dh]),
            out_w,
            out_b: Tensor::zeros(vec![config.max_classes]),
        }
    }

    pub fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("hidden.w", &self.hidden_w),
            ("hidden.b", &self.hidden_b),
            ("out.w", &self.out_w),
            ("out.b", &self.out_b),
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> TapedDecoder {
        TapedDecoder {
            hidden_w: tape.leaf(self.hidden_w.clone(), trainable),
            hidden_b: tape.leaf(self.hidden_b.clone(), trainable),
            out_w: tape.leaf(self.out_w.clone(), trainable),
            out_b: tape.leaf(self.out_b.clone(), trainable),
        }
    }

    /// Maps query-row tokens `[n_test x d_model]` to logits
    /// `[n_test x n_classes]` on `tape`.
    pub(crate) fn decode_on(
        &self,
        tape: &mut Tape,
        reg: &TapedDecoder,
        test_tokens: NodeId,
        n_classes: usize,
    ) -> Result<NodeId> {
        let width = self.out_w.cols();
        if n_classes > width {
            return Err(Error::Capacity {
                what: "task class count",
                got: n_classes,
                limit: width,
            });
        }
        let hidden = tape.matmul(test_tokens, reg.hidden_w)?;
        let hidden = tape.bias_add(hidden, reg.hidden_b)?;
        let hidden = tape.gelu(hidden)?;
        let logits = tape.matmul(hidden, reg.out_w)?;
        let logits = tape.bias_add(logits, reg.out_b)?;
        tape.slice_cols(logits, 0, n_classes)
    }
}

/// Applies `decoder` to the last `n_test` token rows of `acts`, returning
/// `[n_test x n_classes]` logits. The decoder must belong to the layer the
/// activations came from.
pub fn decode(
    acts: &LayerActivations,
    decoder: &DecoderWeights,
    n_test: usize,
    n_classes: usize,
) -> Result<Tensor> {
    if decoder.layer_index != acts.layer_index {
        return Err(Error::Contract(format!(
            "decoder for layer {} applied to activations from layer {}",
            decoder.layer_index, acts.layer_index
        )));
    }
    decode_routed(acts, decoder, n_test, n_classes)
}

/// Like [`decode`] but without the layer-match check, for diagnostics that
/// deliberately route one decoder to a different depth (such as measuring how
/// the final head performs on intermediate activations).
pub fn decode_routed(
    acts: &LayerActivations,
    decoder: &DecoderWeights,
    n_test: usize,
    n_classes: usize,
) -> Result<Tensor> {
    if n_test != acts.n_test {
        return Err(Error::Contract(format!(
            "decode asked for {n_test} query rows but activations carry {}",
            acts.n_test
        )));
    }
    let mut tape = Tape::inference();
    let reg = decoder.register(&mut tape, false);
    let tokens = tape.constant(acts.tokens.clone());
    let test_tokens = tape.slice_rows(tokens, acts.n_train, acts.n_test)?;
    let logits = decoder.decode_on(&mut tape, &reg, test_tokens, n_classes)?;
    Ok(tape.value(logits).clone())
}

/// One decoder per encoder layer, index `i` reading layer `i` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBank {
    decoders: Vec<DecoderWeights>,
}

impl DecoderBank {
    pub fn new(decoders: Vec<DecoderWeights>) -> Result<Self> {
        if decoders.is_empty() {
            return Err(Error::Contract("decoder bank cannot be empty".into()));
        }
        for (i, d) in decoders.iter().enumerate() {
            if d.layer_index != i + 1 {
                return Err(Error::Contract(format!(
                    "decoder at position {} is bound to layer {}, expected {}",
                    i,
                    d.layer_index,
                    i + 1
                )));
            }
        }
        Ok(DecoderBank { decoders })
    }

    pub fn n_layers(&self) -> usize {
        self.decoders.len()
    }

    /// Decoder reading encoder layer `layer` (1-based).
    pub fn for_layer(&self, layer: usize) -> Result<&DecoderWeights> {
        if layer == 0 || layer > self.decoders.len() {
            return Err(Error::Contract(format!(
                "no decoder for layer {layer}; bank covers 1..={}",
                self.decoders.len()
            )));
        }
        Ok(&self.decoders[layer - 1])
    }

    pub fn decoders(&self) -> &[DecoderWeights] {
        &self.decoders
    }
}

/// Training schedule for intermediate-layer decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrainParams {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DecoderTrainParams {
    fn default() -> Self {
        DecoderTrainParams {
            epochs: 5,
            steps_per_epoch: 200,
            batch_size: 8,
            lr: 1e-3,
        }
    }
}

impl DecoderTrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "decoder training epochs, steps and batch size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "decoder lr must be a finite non-negative float, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Task stream base for the decoder at `layer`; keeps its training tasks
/// disjoint from the backbone's (which start at 0) and from other layers'.
fn decoder_stream_base(layer: usize) -> u64 {
    (layer as u64) << 32
}

/// Trains a fresh decoder for intermediate layer `layer` (`1 <= layer <
/// n_layers`) against the frozen backbone, returning the decoder and the
/// per-step losses.
pub fn train_decoder_with_losses(
    layer: usize,
    backbone: &BackboneWeights,
    prior: &PriorConfig,
    params: &DecoderTrainParams,
) -> Result<(DecoderWeights, Vec<f64>)> {
    let n_layers = backbone.config.n_layers;
    if layer == 0 || layer >= n_layers {
        return Err(Error::Contract(format!(
            "train_decoder targets intermediate layers 1..{n_layers}, got {layer}"
        )));
    }
    prior.validate()?;
    params.validate()?;
    if prior.max_features > backbone.config.max_features
        || prior.max_classes > backbone.config.max_classes
    {
        return Err(Error::Config(
            "prior exceeds backbone feature or class capacity".into(),
        ));
    }

    let mut decoder = DecoderWeights::init(&backbone.config, layer);
    let mut opt = Adam::new(params.lr);
    let mut losses = Vec::with_capacity(params.total_steps());
    let base = decoder_stream_base(layer);

    for step in 0..params.total_steps() {
        let mut tape = Tape::new();
        let reg = decoder.register(&mut tape, true);
        let mut batch_loss: Option<NodeId> = None;
        for b in 0..params.batch_size {
            let index = base + (step * params.batch_size + b) as u64;
            let task = sample_task(prior, index)?;
            let input = TaskInput::from(&task);
            let acts = forward_until(&input, backbone, layer)?;
            let d = backbone.config.d_model;
            let test_rows = Tensor::new(
                acts.tokens.data()[input.n_train * d..].to_vec(),
                vec![input.n_test, d],
            )?;
            let tokens = tape.constant(test_rows);
            let logits = decoder.decode_on(&mut tape, &reg, tokens, task.n_classes)?;
            let loss = tape.cross_entropy(logits, &task.y_test)?;
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let loss = tape.scale(
            batch_loss.expect("batch_size >= 1"),
            1.0 / params.batch_size as f64,
        )?;
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("decoder loss for layer {layer} became {loss_value}"),
            });
        }
        losses.push(loss_value);
        tape.backward(loss)?;

        let grads: Vec<Vec<f64>> = reg
            .parameter_ids()
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
            })
            .collect();
        drop(tape);
        let mut tensors = decoder.parameters_mut();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut tensors, &grad_refs)?;
    }
    Ok((decoder, losses))
}

/// [`train_decoder_with_losses`] without the loss trace.
pub fn train_decoder(
    layer: usize,
    backbone: &BackboneWeights,
    prior: &PriorConfig,
    params: &DecoderTrainParams,
) -> Result<DecoderWeights> {
    train_decoder_with_losses(layer, backbone, prior, params).map(|(d, _)| d)
}

/// Trains decoders for every intermediate layer and assembles the bank, with
/// the already-trained final decoder installed unchanged at layer `n_layers`.
/// The backbone is read-only throughout.
pub fn train_bank(
    backbone: &BackboneWeights,
    final_decoder: &DecoderWeights,
    prior: &PriorConfig,
    params: &DecoderTrainParams,
) -> Result<DecoderBank> {
    let n_layers = backbone.config.n_layers;
    if final_decoder.layer_index != n_layers {
        return Err(Error::Contract(format!(
            "final decoder is bound to layer {}, backbone has {} layers",
            final_decoder.layer_index, n_layers
        )));
    }
    let mut decoders = Vec::with_capacity(n_layers);
    for layer in 1..n_layers {
        decoders.push(train_decoder(layer, backbone, prior, params)?);
    }
    decoders.push(final_decoder.clone());
    DecoderBank::new(decoders)
}

/// Cross-entropy of decoding `task`'s query rows at `decoder.layer_index`,
/// together with the gradient of that loss for every parameter: the
/// backbone's in [`BackboneWeights::named_parameters`] order, then the
/// decoder's four tensors prefixed `dec.`. Runs the same kernels training
/// uses; it exists so gradients can be checked against finite differences
/// from outside the crate.
pub fn loss_and_gradients(
    backbone: &BackboneWeights,
    decoder: &DecoderWeights,
    task: &TaskInput,
    targets: &[usize],
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let layer = decoder.layer_index;
    if layer == 0 || layer > backbone.config.n_layers {
        return Err(Error::Contract(format!(
            "decoder is bound to layer {layer}, backbone has {} layers",
            backbone.config.n_layers
        )));
    }
    backbone.check_capacity(task)?;

    let mut tape = Tape::new();
    let reg = backbone.register(&mut tape, true);
    let dec_reg = decoder.register(&mut tape, true);
    let mut x = backbone.embed_on(&mut tape, &reg.embed, task)?;
    for l in 0..layer {
        x = backbone.layer_on(&mut tape, &reg.layers[l], x, task.n_train)?;
    }
    let test_tokens = tape.slice_rows(x, task.n_train, task.n_test)?;
    let logits = decoder.decode_on(&mut tape, &dec_reg, test_tokens, task.n_classes)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let loss_value = tape.scalar(loss);
    tape.backward(loss)?;

    let mut names: Vec<String> = backbone
        .named_parameters()
        .into_iter()
        .map(|(name, _)| name)
        .collect();
    names.extend(decoder.parameters().into_iter().map(|(n, _)| format!("dec.{n}")));
    let mut ids = reg.parameter_ids();
    ids.extend(dec_reg.parameter_ids());
    let grads = names
        .into_iter()
        .zip(ids)
        .map(|(name, id)| {
            let shape = tape.value(id).shape().to_vec();
            let data = tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()]);
            Tensor::new(data, shape).map(|t| (name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, grads))
}

/// Held-out quality of one layer's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuality {
    pub layer: usize,
    pub accuracy: f64,
    pub macro_auc: f64,
}

/// Per-layer accuracy and macro AUC over held-out prior tasks, decoding each
/// layer with its own head from `bank`.
pub fn per_layer_quality(
    backbone: &BackboneWeights,
    bank: &DecoderBank,
    prior: &PriorConfig,
    first_task_index: u64,
    n_tasks: usize,
) -> Result<Vec<LayerQuality>> {
    let picks: Vec<&DecoderWeights> = (1..=backbone.config.n_layers)
        .map(|l| bank.for_layer(l))
        .collect::<Result<_>>()?;
    layer_quality_impl(backbone, prior, first_task_index, n_tasks, &picks, false)
}

/// Per-layer quality when every layer is decoded by the same final-layer
/// head, the ablation a dedicated bank has to beat.
pub fn per_layer_quality_routed(
    backbone: &BackboneWeights,
    final_decoder: &DecoderWeights,
    prior: &PriorConfig,
    first_task_index: u64,
    n_tasks: usize,
) -> Result<Vec<LayerQuality>> {
    let picks: Vec<&DecoderWeights> =
        (0..backbone.config.n_layers).map(|_| final_decoder).collect();
    layer_quality_impl(backbone, prior, first_task_index, n_tasks, &picks, true)
}

fn layer_quality_impl(
    backbone: &BackboneWeights,
    prior: &PriorConfig,
    first_task_index: u64,
    n_tasks: usize,
    decoders: &[&DecoderWeights],
    routed: bool,
) -> Result<Vec<LayerQuality>> {
    let n_layers = backbone.config.n_layers;
    if n_tasks == 0 || decoders.len() != n_layers {
        return Err(Error::Contract(
            "layer quality needs at least one task and one decoder per layer".into(),
        ));
    }
    let mut acc_sum = vec![0.0; n_layers];
    let mut auc_sum = vec![0.0; n_layers];
    let mut auc_count = vec![0usize; n_layers];
    for t in 0..n_tasks {
        let task = sample_task(prior, first_task_index + t as u64)?;
        let input = TaskInput::from(&task);
        let mut acts = embed(&input, backbone)?;
        for layer in 1..=n_layers {
            acts = encode_layer(&acts, layer - 1, backbone)?;
            let logits = if routed {
                decode_routed(&acts, decoders[layer - 1], input.n_test, task.n_classes)?
            } else {
                decode(&acts, decoders[layer - 1], input.n_test, task.n_classes)?
            };
            let probs = Tensor::new(
                softmax_rows(logits.data(), input.n_test, task.n_classes),
                vec![input.n_test, task.n_classes],
            )?;
            acc_sum[layer - 1] += metrics::accuracy(&probs, &task.y_test)?;
            match metrics::macro_auc(&probs, &task.y_test, task.n_classes) {
                Ok(auc) => {
                    auc_sum[layer - 1] += auc;
                    auc_count[layer - 1] += 1;
                }
                Err(Error::Metric(_)) => {}
                Err(other) => return Err(other),
            }
        }
    }
    (1..=n_layers)
        .map(|layer| {
            let i = layer - 1;
            if auc_count[i] == 0 {
                return Err(Error::Metric(format!(
                    "AUC undefined at layer {layer}: every held-out task had single-class queries"
                )));
            }
            Ok(LayerQuality {
                layer,
                accuracy: acc_sum[i] / n_tasks as f64,
                macro_auc: auc_sum[i] / auc_count[i] as f64,
            })
        })
        .collect()
}

/// Accuracy of always predicting the most frequent context class (ties to the
/// lowest class index), measured on the query labels.
pub fn majority_class_accuracy(y_train: &[usize], y_test: &[usize], n_classes: usize) -> f64 {
    let mut counts = vec![0usize; n_classes];
    for &y in y_train {
        counts[y] += 1;
    }
    let mut mode = 0;
    for c in 1..n_classes {
        if counts[c] > counts[mode] {
            mode = c;
        }
    }
    if y_test.is_empty() {
        return 0.0;
    }
    y_test.iter().filter(|&&y| y == mode).count() as f64 / y_test.len() as f64
}
