//! Sample-axis transformer encoder for in-context tabular classification.
//!
//! Every dataset row becomes one token: context rows embed their features and
//! their label, query rows embed features plus a shared "unknown label"
//! vector. Pre-norm transformer blocks then mix tokens under a mask that lets
//! context rows attend to each other and query rows attend to the context and
//! themselves, never to other queries. A query row's prediction therefore
//! depends only on itself and the labeled context, and context-row order
//! cannot matter.
//!
//! Training and inference share the same forward builders (one code path,
//! recorded on a gradient tape or an inference tape), which is what makes
//! truncated forward passes bit-identical prefixes of full ones.

use crate::decoder::DecoderWeights;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::prior::{sample_task, PriorConfig, SyntheticTask};
use crate::rng::Pcg32;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Layer count of the full-scale reference backbone; the desk default is
/// intentionally half of this.
pub const FULL_SCALE_N_LAYERS: usize = 12;

/// Architecture settings for the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Tasks with more features than this are rejected (features are
    /// zero-padded up to it).
    pub max_features: usize,
    /// Largest class count a task may have; also the width of decoder
    /// outputs and the index of the "unknown label" embedding row.
    pub max_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            d_ff: 256,
            max_features: 8,
            max_classes: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} must be divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 1 {
            return Err(Error::Config("model.n_layers must be at least 1".into()));
        }
        if self.max_classes < 2 {
            return Err(Error::Config("model.max_classes must be at least 2".into()));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.max_features == 0 {
            return Err(Error::Config(
                "model dimensions must all be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hidden width of decoder heads reading this backbone.
    pub fn d_hidden(&self) -> usize {
        2 * self.d_model
    }
}

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn1_w: Tensor,
    pub ffn1_b: Tensor,
    pub ffn2_w: Tensor,
    pub ffn2_b: Tensor,
}

/// All backbone parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub config: ModelConfig,
    /// Affine map from zero-padded features to the embedding space,
    /// `[max_features x d_model]` plus a `[d_model]` bias.
    pub feature_w: Tensor,
    pub feature_b: Tensor,
    /// `[(max_classes + 1) x d_model]`; row `max_classes` is the shared
    /// "unknown label" embedding used by query rows.
    pub label_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl BackboneWeights {
    /// Seeded initialization: projection and embedding weights drawn from
    /// Normal(0, 0.02), biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg32::keyed(config.seed, 0xBAC0);
        let d = config.d_model;
        let mut normal =
            |rows: usize, cols: usize| Tensor::from_fn(rows, cols, |_, _| rng.normal_scaled(0.0, 0.02));
        let feature_w = normal(config.max_features, d);
        let label_embedding = normal(config.max_classes + 1, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: Tensor::filled(vec![d], 1.0),
                ln1_bias: Tensor::zeros(vec![d]),
                wq: normal(d, d),
                bq: Tensor::zeros(vec![d]),
                wk: normal(d, d),
                bk: Tensor::zeros(vec![d]),
                wv: normal(d, d),
                bv: Tensor::zeros(vec![d]),
                wo: normal(d, d),
                bo: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::filled(vec![d], 1.0),
                ln2_bias: Tensor::zeros(vec![d]),
                ffn1_w: normal(d, config.d_ff),
                ffn1_b: Tensor::zeros(vec![config.d_ff]),
                ffn2_w: normal(config.d_ff, d),
                ffn2_b: Tensor::zeros(vec![d]),
            });
        }
        Ok(BackboneWeights {
            config: config.clone(),
            feature_w,
            feature_b: Tensor::zeros(vec![d]),
            label_embedding,
            layers,
        })
    }

    /// Canonical (name, tensor) listing; the order defines the parameter
    /// order used by the optimizer and the checkpoint format.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("feat.w".into(), &self.feature_w),
            ("feat.b".into(), &self.feature_b),
            ("label.emb".into(), &self.label_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            out.extend([
                (format!("layer{n}.ln1.g"), &l.ln1_gain),
                (format!("layer{n}.ln1.b"), &l.ln1_bias),
                (format!("layer{n}.wq"), &l.wq),
                (format!("layer{n}.bq"), &l.bq),
                (format!("layer{n}.wk"), &l.wk),
                (format!("layer{n}.bk"), &l.bk),
                (format!("layer{n}.wv"), &l.wv),
                (format!("layer{n}.bv"), &l.bv),
                (format!("layer{n}.wo"), &l.wo),
                (format!("layer{n}.bo"), &l.bo),
                (format!("layer{n}.ln2.g"), &l.ln2_gain),
                (format!("layer{n}.ln2.b"), &l.ln2_bias),
                (format!("layer{n}.ffn1.w"), &l.ffn1_w),
                (format!("layer{n}.ffn1.b"), &l.ffn1_b),
                (format!("layer{n}.ffn2.w"), &l.ffn2_w),
                (format!("layer{n}.ffn2.b"), &l.ffn2_b),
            ]);
        }
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("feat.w".into(), &mut self.feature_w),
            ("feat.b".into(), &mut self.feature_b),
            ("label.emb".into(), &mut self.label_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = i + 1;
            out.extend([
                (format!("layer{n}.ln1.g"), &mut l.ln1_gain),
                (format!("layer{n}.ln1.b"), &mut l.ln1_bias),
                (format!("layer{n}.wq"), &mut l.wq),
                (format!("layer{n}.bq"), &mut l.bq),
                (format!("layer{n}.wk"), &mut l.wk),
                (format!("layer{n}.bk"), &mut l.bk),
                (format!("layer{n}.wv"), &mut l.wv),
                (format!("layer{n}.bv"), &mut l.bv),
                (format!("layer{n}.wo"), &mut l.wo),
                (format!("layer{n}.bo"), &mut l.bo),
                (format!("layer{n}.ln2.g"), &mut l.ln2_gain),
                (format!("layer{n}.ln2.b"), &mut l.ln2_bias),
                (format!("layer{n}.ffn1.w"), &mut l.ffn1_w),
                (format!("layer{n}.ffn1.b"), &mut l.ffn1_b),
                (format!("layer{n}.ffn2.w"), &mut l.ffn2_w),
                (format!("layer{n}.ffn2.b"), &mut l.ffn2_b),
            ]);
        }
        out
    }
}

/// Borrowed view of one classification task as the model consumes it: labeled
/// context rows plus unlabeled query rows. Query labels are deliberately not
/// part of this type, so no forward code can read them.
#[derive(Debug, Clone, Copy)]
pub struct TaskInput<'a> {
    pub x_train: &'a [f64],
    pub y_train: &'a [usize],
    pub x_test: &'a [f64],
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub n_classes: usize,
}

impl<'a> TaskInput<'a> {
    pub fn new(
        x_train: &'a [f64],
        y_train: &'a [usize],
        x_test: &'a [f64],
        n_features: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if n_features == 0
            || !x_train.len().is_multiple_of(n_features)
            || !x_test.len().is_multiple_of(n_features)
        {
            return Err(Error::Contract(
                "task buffers are not a whole number of rows".into(),
            ));
        }
        let n_train = x_train.len() / n_features;
        let n_test = x_test.len() / n_features;
        if n_train == 0 || n_test == 0 || y_train.len() != n_train {
            return Err(Error::Contract(
                "task needs at least one context row and one query row".into(),
            ));
        }
        if n_classes < 2 || y_train.iter().any(|&y| y >= n_classes) {
            return Err(Error::Contract("context labels outside 0..n_classes".into()));
        }
        if x_train.iter().chain(x_test).any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("task features"));
        }
        Ok(TaskInput {
            x_train,
            y_train,
            x_test,
            n_train,
            n_test,
            n_features,
            n_classes,
        })
    }

    pub fn rows(&self) -> usize {
        self.n_train + self.n_test
    }
}

impl<'a> From<&'a SyntheticTask> for TaskInput<'a> {
    fn from(task: &'a SyntheticTask) -> Self {
        TaskInput {
            x_train: &task.x_train,
            y_train: &task.y_train,
            x_test: &task.x_test,
            n_train: task.n_train,
            n_test: task.n_test,
            n_features: task.n_features,
            n_classes: task.n_classes,
        }
    }
}

/// Token matrix after some number of encoder layers. Row order is fixed:
/// context rows first, then query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    /// `[(n_train + n_test) x d_model]`.
    pub tokens: Tensor,
    /// 0 means post-embedding; `i` means after encoder layer `i`.
    pub layer_index: usize,
    pub n_train: usize,
    pub n_test: usize,
}

/// Node handles for one block's registered parameters.
pub(crate) struct TapedLayer {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    ffn1_w: NodeId,
    ffn1_b: NodeId,
    ffn2_w: NodeId,
    ffn2_b: NodeId,
}

/// Node handles for the embedding parameters on some tape.
pub(crate) struct TapedEmbed {
    feature_w: NodeId,
    feature_b: NodeId,
    label_embedding: NodeId,
}

/// Node handles for the whole backbone on some tape, in
/// [`BackboneWeights::named_parameters`] order.
pub(crate) struct TapedBackbone {
    pub(crate) embed: TapedEmbed,
    pub(crate) layers: Vec<TapedLayer>,
}

impl TapedBackbone {
    /// Flat id list matching `named_parameters` order.
    pub(crate) fn parameter_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![
            self.embed.feature_w,
            self.embed.feature_b,
            self.embed.label_embedding,
        ];
        for l in &self.layers {
            ids.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                l.ln2_gain, l.ln2_bias, l.ffn1_w, l.ffn1_b, l.ffn2_w, l.ffn2_b,
            ]);
        }
        ids
    }
}

impl BackboneWeights {
    pub(crate) fn register_embed(&self, tape: &mut Tape, trainable: bool) -> TapedEmbed {
        TapedEmbed {
            feature_w: tape.leaf(self.feature_w.clone(), trainable),
            feature_b: tape.leaf(self.feature_b.clone(), trainable),
            label_embedding: tape.leaf(self.label_embedding.clone(), trainable),
        }
    }

    pub(crate) fn register_layer(&self, tape: &mut Tape, layer: usize, trainable: bool) -> TapedLayer {
        let l = &self.layers[layer];
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        TapedLayer {
            ln1_gain: leaf(&l.ln1_gain),
            ln1_bias: leaf(&l.ln1_bias),
            wq: leaf(&l.wq),
            bq: leaf(&l.bq),
            wk: leaf(&l.wk),
            bk: leaf(&l.bk),
            wv: leaf(&l.wv),
            bv: leaf(&l.bv),
            wo: leaf(&l.wo),
            bo: leaf(&l.bo),
            ln2_gain: leaf(&l.ln2_gain),
            ln2_bias: leaf(&l.ln2_bias),
            ffn1_w: leaf(&l.ffn1_w),
            ffn1_b: leaf(&l.ffn1_b),
            ffn2_w: leaf(&l.ffn2_w),
            ffn2_b: leaf(&l.ffn2_b),
        }
    }

    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> TapedBackbone {
        TapedBackbone {
            embed: self.register_embed(tape, trainable),
            layers: (0..self.layers.len())
                .map(|i| self.register_layer(tape, i, trainable))
                .collect(),
        }
    }

    /// Checks task capacity against this backbone.
    pub fn check_capacity(&self, task: &TaskInput) -> Result<()> {
        if task.n_features > self.config.max_features {
            return Err(Error::Capacity {
                what: "task feature count",
                got: task.n_features,
                limit: self.config.max_features,
            });
        }
        if task.n_classes > self.config.max_classes {
            return Err(Error::Capacity {
                what: "task class count",
                got: task.n_classes,
                limit: self.config.max_classes,
            });
        }
        Ok(())
    }

    /// Builds layer-0 tokens on `tape`: feature projection of the zero-padded
    /// feature matrix plus the label embedding (context rows) or the unknown
    /// label embedding (query rows). No positional information enters here.
    pub(crate) fn embed_on(
        &self,
        tape: &mut Tape,
        reg: &TapedEmbed,
        task: &TaskInput,
    ) -> Result<NodeId> {
        self.check_capacity(task)?;
        let rows = task.rows();
        let fmax = self.config.max_features;
        let f = task.n_features;
        let mut padded = vec![0.0; rows * fmax];
        for r in 0..task.n_train {
            padded[r * fmax..r * fmax + f].copy_from_slice(&task.x_train[r * f..(r + 1) * f]);
        }
        for r in 0..task.n_test {
            let dst = (task.n_train + r) * fmax;
            padded[dst..dst + f].copy_from_slice(&task.x_test[r * f..(r + 1) * f]);
        }
        let features = tape.constant(Tensor::new(padded, vec![rows, fmax])?);
        let projected = tape.matmul(features, reg.feature_w)?;
        let projected = tape.bias_add(projected, reg.feature_b)?;

        let unknown = self.config.max_classes;
        let mut label_idx = Vec::with_capacity(rows);
        label_idx.extend_from_slice(task.y_train);
        label_idx.resize(rows, unknown);
        let labels = tape.gather_rows(reg.label_embedding, &label_idx)?;
        tape.add(projected, labels)
    }

    /// Applies one registered block to token matrix `x` on `tape`.
    pub(crate) fn layer_on(
        &self,
        tape: &mut Tape,
        l: &TapedLayer,
        x: NodeId,
        n_train: usize,
    ) -> Result<NodeId> {
        let normed = tape.layer_norm(x, l.ln1_gain, l.ln1_bias)?;
        let q = tape.matmul(normed, l.wq)?;
        let q = tape.bias_add(q, l.bq)?;
        let k = tape.matmul(normed, l.wk)?;
        let k = tape.bias_add(k, l.bk)?;
        let v = tape.matmul(normed, l.wv)?;
        let v = tape.bias_add(v, l.bv)?;
        let attn = tape.masked_attention(q, k, v, n_train, self.config.n_heads)?;
        let attn = tape.matmul(attn, l.wo)?;
        let attn = tape.bias_add(attn, l.bo)?;
        let x = tape.add(x, attn)?;

        let normed = tape.layer_norm(x, l.ln2_gain, l.ln2_bias)?;
        let ff = tape.matmul(normed, l.ffn1_w)?;
        let ff = tape.bias_add(ff, l.ffn1_b)?;
        let ff = tape.gelu(ff)?;
        let ff = tape.matmul(ff, l.ffn2_w)?;
        let ff = tape.bias_add(ff, l.ffn2_b)?;
        tape.add(x, ff)
    }
}

/// Embeds a task into layer-0 activations.
pub fn embed(task: &TaskInput, weights: &BackboneWeights) -> Result<LayerActivations> {
    let mut tape = Tape::inference();
    let reg = weights.register_embed(&mut tape, false);
    let tokens = weights.embed_on(&mut tape, &reg, task)?;
    Ok(LayerActivations {
        tokens: tape.value(tokens).clone(),
        layer_index: 0,
        n_train: task.n_train,
        n_test: task.n_test,
    })
}

/// Applies encoder layer `layer + 1` to activations at `layer_index == layer`.
pub fn encode_layer(
    acts: &LayerActivations,
    layer: usize,
    weights: &BackboneWeights,
) -> Result<LayerActivations> {
    if acts.layer_index != layer || layer >= weights.config.n_layers {
        return Err(Error::Contract(format!(
            "encode_layer: activations at layer {} cannot feed layer {} of {}",
            acts.layer_index,
            layer,
            weights.config.n_layers
        )));
    }
    let mut tape = Tape::inference();
    let reg = weights.register_layer(&mut tape, layer, false);
    let x = tape.constant(acts.tokens.clone());
    let out = weights.layer_on(&mut tape, &reg, x, acts.n_train)?;
    Ok(LayerActivations {
        tokens: tape.value(out).clone(),
        layer_index: layer + 1,
        n_train: acts.n_train,
        n_test: acts.n_test,
    })
}

/// Embeds and runs the first `k` encoder layers, also returning the FLOPs
/// charged by the run.
pub fn forward_until_counted(
    task: &TaskInput,
    weights: &BackboneWeights,
    k: usize,
) -> Result<(LayerActivations, u64)> {
    if k > weights.config.n_layers {
        return Err(Error::Contract(format!(
            "forward_until: layer count {k} exceeds n_layers {}",
            weights.config.n_layers
        )));
    }
    let mut tape = Tape::inference();
    let emb = weights.register_embed(&mut tape, false);
    let mut x = weights.embed_on(&mut tape, &emb, task)?;
    for layer in 0..k {
        let reg = weights.register_layer(&mut tape, layer, false);
        x = weights.layer_on(&mut tape, &reg, x, task.n_train)?;
    }
    Ok((
        LayerActivations {
            tokens: tape.value(x).clone(),
            layer_index: k,
            n_train: task.n_train,
            n_test: task.n_test,
        },
        tape.flops(),
    ))
}

/// Embeds and runs the first `k` encoder layers. The result is a bit-exact
/// prefix of a deeper run: stopping at `k` and truncating never disagree.
pub fn forward_until(
    task: &TaskInput,
    weights: &BackboneWeights,
    k: usize,
) -> Result<LayerActivations> {
    forward_until_counted(task, weights, k).map(|(acts, _)| acts)
}

/// Hyperparameters for [`train_backbone`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneTrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BackboneTrainParams {
    fn default() -> Self {
        BackboneTrainParams {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
        }
    }
}

impl BackboneTrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "train.steps and train.batch_size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be a finite non-negative float, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Pretrains the backbone end to end with its final decoder on synthetic
/// tasks: cross-entropy on query rows, Adam updates, tasks drawn from stream
/// indices `0 .. steps * batch_size`. Deterministic given the config seeds.
pub fn train_backbone(
    config: &ModelConfig,
    prior: &PriorConfig,
    params: &BackboneTrainParams,
) -> Result<(BackboneWeights, DecoderWeights)> {
    train_backbone_with_losses(config, prior, params).map(|(b, d, _)| (b, d))
}

/// [`train_backbone`] plus the per-step loss trace.
pub fn train_backbone_with_losses(
    config: &ModelConfig,
    prior: &PriorConfig,
    params: &BackboneTrainParams,
) -> Result<(BackboneWeights, DecoderWeights, Vec<f64>)> {
    config.validate()?;
    prior.validate()?;
    params.validate()?;
    if prior.max_features > config.max_features || prior.max_classes > config.max_classes {
        return Err(Error::Config(format!(
            "prior draws up to {} features / {} classes but the model caps at {} / {}",
            prior.max_features, prior.max_classes, config.max_features, config.max_classes
        )));
    }
    let mut backbone = BackboneWeights::init(config)?;
    let mut final_decoder = DecoderWeights::init(config, config.n_layers);
    let mut opt = Adam::new(params.lr);
    let mut losses = Vec::with_capacity(params.steps);

    for step in 0..params.steps {
        let mut tape = Tape::new();
        let reg = backbone.register(&mut tape, true);
        let dec_reg = final_decoder.register(&mut tape, true);

        let mut batch_loss: Option<NodeId> = None;
        for b in 0..params.batch_size {
            let index = (step * params.batch_size + b) as u64;
            let task = sample_task(prior, index)?;
            let input = TaskInput::from(&task);
            let mut x = backbone.embed_on(&mut tape, &reg.embed, &input)?;
            for layer in 0..config.n_layers {
                x = backbone.layer_on(&mut tape, &reg.layers[layer], x, input.n_train)?;
            }
            let test_tokens = tape.slice_rows(x, input.n_train, input.n_test)?;
            let logits = final_decoder.decode_on(&mut tape, &dec_reg, test_tokens, task.n_classes)?;
            let loss = tape.cross_entropy(logits, &task.y_test)?;
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let loss = tape.scale(batch_loss.expect("batch_size >= 1"), 1.0 / params.batch_size as f64)?;
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss became {loss_value}"),
            });
        }
        losses.push(loss_value);
        tape.backward(loss)?;

        let mut ids = reg.parameter_ids();
        ids.extend(dec_reg.parameter_ids());
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
            })
            .collect();
        drop(tape);

        let mut tensors: Vec<&mut Tensor> = backbone
            .named_parameters_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        tensors.extend(final_decoder.parameters_mut());
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut tensors, &grad_refs)?;
    }
    Ok((backbone, final_decoder, losses))
}
