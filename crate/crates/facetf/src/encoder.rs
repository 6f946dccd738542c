//! Pre-LN transformer encoder over the token sequence, with scaled
//! dot-product attention and GELU MLP blocks.
//!
//! Each block computes `z' = MSA(LN(z)) + z` followed by
//! `z = MLP(LN(z')) + z'`; the output embedding is the layer-normalized
//! class token (or the mean of the patch tokens when mean pooling is
//! selected).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};
use crate::tokenizer::{extract_patches, PatchConfig};

/// Which token(s) become the face embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMode {
    ClassToken,
    MeanPool,
}

impl OutputMode {
    pub fn name(self) -> &'static str {
        match self {
            OutputMode::ClassToken => "class_token",
            OutputMode::MeanPool => "mean_pool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "class_token" => Some(OutputMode::ClassToken),
            "mean_pool" => Some(OutputMode::MeanPool),
            _ => None,
        }
    }
}

/// Encoder hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Token width `D`.
    pub dim: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Encoder blocks; zero is a valid degenerate stack.
    pub depth: usize,
    /// Hidden width of the per-token MLP.
    pub mlp_dim: usize,
    pub output_mode: OutputMode,
    /// Adds a learned bias to the fused query/key/value projection.
    pub qkv_bias: bool,
}

impl ModelConfig {
    pub fn new(dim: usize, heads: usize, depth: usize, mlp_dim: usize) -> Result<Self> {
        if dim == 0 || heads == 0 || mlp_dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: dim={dim} heads={heads} mlp_dim={mlp_dim}"
            )));
        }
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "token width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(ModelConfig {
            dim,
            heads,
            depth,
            mlp_dim,
            output_mode: OutputMode::ClassToken,
            qkv_bias: false,
        })
    }

    pub fn with_output_mode(mut self, mode: OutputMode) -> Self {
        self.output_mode = mode;
        self
    }

    pub fn with_qkv_bias(mut self, on: bool) -> Self {
        self.qkv_bias = on;
        self
    }

    /// Per-head width `D_h = D / heads`.
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

// ── Parameters ───────────────────────────────────────────────────────────

/// Learnable arrays of one encoder block.
///
/// `qkv` packs the per-head query/key/value projections side by side:
/// head `h` owns columns `[3·D_h·h, 3·D_h·(h+1))`, split into thirds.
#[derive(Clone, Debug)]
pub struct LayerParams<S> {
    pub qkv: Tensor<S>,
    pub qkv_bias: Option<Tensor<S>>,
    pub msa: Tensor<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
    pub mlp_w1: Tensor<S>,
    pub mlp_b1: Tensor<S>,
    pub mlp_w2: Tensor<S>,
    pub mlp_b2: Tensor<S>,
}

/// Every learnable array of the backbone, in checkpoint order.
#[derive(Clone, Debug)]
pub struct ModelParams<S> {
    pub patch_embed: Tensor<S>,
    pub class_token: Tensor<S>,
    pub pos_embed: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_ln_gamma: Tensor<S>,
    pub final_ln_beta: Tensor<S>,
}

/// Fills `data` with draws from N(0, sigma²) clipped by resampling to
/// ±2 sigma.
pub(crate) fn truncated_normal_fill<S: Scalar, R: Rng>(data: &mut [S], sigma: f64, rng: &mut R) {
    let dist = Normal::new(0.0, sigma).expect("sigma must be positive");
    for v in data.iter_mut() {
        let draw = loop {
            let d: f64 = dist.sample(rng);
            if d.abs() <= 2.0 * sigma {
                break d;
            }
        };
        *v = S::from_f64(draw);
    }
}

const INIT_SIGMA: f64 = 0.02;

impl<S: Scalar> ModelParams<S> {
    /// Initializes projections and the class token with truncated normal
    /// draws (sigma 0.02); positions, biases, and LN offsets start at zero
    /// and LN scales at one.
    pub fn init<R: Rng>(patch: &PatchConfig, model: &ModelConfig, rng: &mut R) -> Self {
        let mut params = Self::zeros(patch, model);
        truncated_normal_fill(params.patch_embed.data_mut(), INIT_SIGMA, rng);
        truncated_normal_fill(params.class_token.data_mut(), INIT_SIGMA, rng);
        for layer in &mut params.layers {
            truncated_normal_fill(layer.qkv.data_mut(), INIT_SIGMA, rng);
            truncated_normal_fill(layer.msa.data_mut(), INIT_SIGMA, rng);
            truncated_normal_fill(layer.mlp_w1.data_mut(), INIT_SIGMA, rng);
            truncated_normal_fill(layer.mlp_w2.data_mut(), INIT_SIGMA, rng);
        }
        params
    }

    /// All-zero parameters except unit LN scales; the shape template for
    /// checkpoint loading and a handy blank slate in tests.
    pub fn zeros(patch: &PatchConfig, model: &ModelConfig) -> Self {
        let d = model.dim;
        let tokens = patch.num_patches() + 1;
        let layers = (0..model.depth)
            .map(|_| LayerParams {
                qkv: Tensor::zeros(vec![d, 3 * d]),
                qkv_bias: model.qkv_bias.then(|| Tensor::zeros(vec![1, 3 * d])),
                msa: Tensor::zeros(vec![d, d]),
                ln1_gamma: Tensor::full(vec![d], S::one()),
                ln1_beta: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::full(vec![d], S::one()),
                ln2_beta: Tensor::zeros(vec![d]),
                mlp_w1: Tensor::zeros(vec![d, model.mlp_dim]),
                mlp_b1: Tensor::zeros(vec![model.mlp_dim]),
                mlp_w2: Tensor::zeros(vec![model.mlp_dim, d]),
                mlp_b2: Tensor::zeros(vec![d]),
            })
            .collect();
        ModelParams {
            patch_embed: Tensor::zeros(vec![patch.patch_dim(), d]),
            class_token: Tensor::zeros(vec![1, d]),
            pos_embed: Tensor::zeros(vec![tokens, d]),
            layers,
            final_ln_gamma: Tensor::full(vec![d], S::one()),
            final_ln_beta: Tensor::zeros(vec![d]),
        }
    }

    /// Parameter names in the fixed traversal order shared by [`Self::flat`]
    /// and the checkpoint manifest.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "patch_embed".to_string(),
            "class_token".to_string(),
            "pos_embed".to_string(),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            names.push(format!("layer{i}.qkv"));
            if layer.qkv_bias.is_some() {
                names.push(format!("layer{i}.qkv_bias"));
            }
            names.push(format!("layer{i}.msa"));
            names.push(format!("layer{i}.ln1_gamma"));
            names.push(format!("layer{i}.ln1_beta"));
            names.push(format!("layer{i}.ln2_gamma"));
            names.push(format!("layer{i}.ln2_beta"));
            names.push(format!("layer{i}.mlp_w1"));
            names.push(format!("layer{i}.mlp_b1"));
            names.push(format!("layer{i}.mlp_w2"));
            names.push(format!("layer{i}.mlp_b2"));
        }
        names.push("final_ln_gamma".to_string());
        names.push("final_ln_beta".to_string());
        names
    }

    pub fn flat(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> =
            vec![&self.patch_embed, &self.class_token, &self.pos_embed];
        for layer in &self.layers {
            out.push(&layer.qkv);
            if let Some(b) = &layer.qkv_bias {
                out.push(b);
            }
            out.push(&layer.msa);
            out.push(&layer.ln1_gamma);
            out.push(&layer.ln1_beta);
            out.push(&layer.ln2_gamma);
            out.push(&layer.ln2_beta);
            out.push(&layer.mlp_w1);
            out.push(&layer.mlp_b1);
            out.push(&layer.mlp_w2);
            out.push(&layer.mlp_b2);
        }
        out.push(&self.final_ln_gamma);
        out.push(&self.final_ln_beta);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> =
            vec![&mut self.patch_embed, &mut self.class_token, &mut self.pos_embed];
        for layer in &mut self.layers {
            out.push(&mut layer.qkv);
            if let Some(b) = &mut layer.qkv_bias {
                out.push(b);
            }
            out.push(&mut layer.msa);
            out.push(&mut layer.ln1_gamma);
            out.push(&mut layer.ln1_beta);
            out.push(&mut layer.ln2_gamma);
            out.push(&mut layer.ln2_beta);
            out.push(&mut layer.mlp_w1);
            out.push(&mut layer.mlp_b1);
            out.push(&mut layer.mlp_w2);
            out.push(&mut layer.mlp_b2);
        }
        out.push(&mut self.final_ln_gamma);
        out.push(&mut self.final_ln_beta);
        out
    }

    /// Registers every array on the tape, as trainable leaves or frozen
    /// constants, returning ids in the same structure.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> ModelParamIds {
        let reg = |tape: &mut Tape<S>, t: &Tensor<S>| {
            if trainable {
                tape.leaf(t.clone().into_param())
            } else {
                tape.constant(t.clone())
            }
        };
        let patch_embed = reg(tape, &self.patch_embed);
        let class_token = reg(tape, &self.class_token);
        let pos_embed = reg(tape, &self.pos_embed);
        let layers = self
            .layers
            .iter()
            .map(|layer| LayerParamIds {
                qkv: reg(tape, &layer.qkv),
                qkv_bias: layer.qkv_bias.as_ref().map(|b| reg(tape, b)),
                msa: reg(tape, &layer.msa),
                ln1_gamma: reg(tape, &layer.ln1_gamma),
                ln1_beta: reg(tape, &layer.ln1_beta),
                ln2_gamma: reg(tape, &layer.ln2_gamma),
                ln2_beta: reg(tape, &layer.ln2_beta),
                mlp_w1: reg(tape, &layer.mlp_w1),
                mlp_b1: reg(tape, &layer.mlp_b1),
                mlp_w2: reg(tape, &layer.mlp_w2),
                mlp_b2: reg(tape, &layer.mlp_b2),
            })
            .collect();
        let final_ln_gamma = reg(tape, &self.final_ln_gamma);
        let final_ln_beta = reg(tape, &self.final_ln_beta);
        ModelParamIds { patch_embed, class_token, pos_embed, layers, final_ln_gamma, final_ln_beta }
    }
}

/// Tape ids mirroring [`ModelParams`].
pub struct ModelParamIds {
    pub patch_embed: TensorId,
    pub class_token: TensorId,
    pub pos_embed: TensorId,
    pub layers: Vec<LayerParamIds>,
    pub final_ln_gamma: TensorId,
    pub final_ln_beta: TensorId,
}

pub struct LayerParamIds {
    pub qkv: TensorId,
    pub qkv_bias: Option<TensorId>,
    pub msa: TensorId,
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_b1: TensorId,
    pub mlp_w2: TensorId,
    pub mlp_b2: TensorId,
}

impl ModelParamIds {
    /// Ids in the order of [`ModelParams::names`].
    pub fn flat(&self) -> Vec<TensorId> {
        let mut out = vec![self.patch_embed, self.class_token, self.pos_embed];
        for layer in &self.layers {
            out.push(layer.qkv);
            if let Some(b) = layer.qkv_bias {
                out.push(b);
            }
            out.push(layer.msa);
            out.push(layer.ln1_gamma);
            out.push(layer.ln1_beta);
            out.push(layer.ln2_gamma);
            out.push(layer.ln2_beta);
            out.push(layer.mlp_w1);
            out.push(layer.mlp_b1);
            out.push(layer.mlp_w2);
            out.push(layer.mlp_b2);
        }
        out.push(self.final_ln_gamma);
        out.push(self.final_ln_beta);
        out
    }
}

// ── Attention ────────────────────────────────────────────────────────────

/// Post-softmax attention matrices captured during a forward pass:
/// `layers[l][h]` is the `(N+1)×(N+1)` row-stochastic matrix of head `h`.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord<S> {
    pub layers: Vec<Vec<Tensor<S>>>,
}

impl<S: Scalar> AttentionRecord<S> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Token count (class token included) of the recorded matrices.
    pub fn seq_len(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, |a| a.rows())
    }
}

/// Scaled dot-product attention of one head.
///
/// `u_qkv` is the head's `[D × 3·D_h]` projection; its output splits into
/// thirds `q, k, v`. Returns the mixed values and the post-softmax
/// attention matrix `softmax(q·kᵀ / sqrt(D_h))`.
pub fn self_attention<S: Scalar>(
    tape: &mut Tape<S>,
    z: TensorId,
    u_qkv: TensorId,
    qkv_bias: Option<TensorId>,
    head_dim: usize,
) -> (TensorId, TensorId) {
    assert_eq!(
        tape.value(u_qkv).cols(),
        3 * head_dim,
        "qkv projection of shape {:?} does not yield three {head_dim}-wide blocks",
        tape.value(u_qkv).shape()
    );
    let mut qkv = tape.matmul(z, u_qkv);
    if let Some(bias) = qkv_bias {
        qkv = tape.add_row_broadcast(qkv, bias);
    }
    let q = tape.slice_cols(qkv, 0, head_dim);
    let k = tape.slice_cols(qkv, head_dim, head_dim);
    let v = tape.slice_cols(qkv, 2 * head_dim, head_dim);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, S::from_f64(1.0 / (head_dim as f64).sqrt()));
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, v);
    (mixed, attn)
}

/// Multi-head attention: runs every head of the packed `u_qkv` projection,
/// concatenates the mixed values, and applies the output projection.
///
/// When `record` is set, returns each head's attention matrix by value.
pub fn msa<S: Scalar>(
    tape: &mut Tape<S>,
    z: TensorId,
    u_qkv: TensorId,
    qkv_bias: Option<TensorId>,
    u_msa: TensorId,
    heads: usize,
    record: bool,
) -> (TensorId, Option<Vec<Tensor<S>>>) {
    let total = tape.value(u_qkv).cols();
    assert_eq!(
        total % (3 * heads),
        0,
        "qkv projection of shape {:?} does not split into {heads} heads",
        tape.value(u_qkv).shape()
    );
    let head_dim = total / (3 * heads);
    let mut mixed = Vec::with_capacity(heads);
    let mut attns = record.then(Vec::new);
    for h in 0..heads {
        let u_head = tape.slice_cols(u_qkv, h * 3 * head_dim, 3 * head_dim);
        let b_head = qkv_bias.map(|b| tape.slice_cols(b, h * 3 * head_dim, 3 * head_dim));
        let (out, attn) = self_attention(tape, z, u_head, b_head, head_dim);
        mixed.push(out);
        if let Some(list) = &mut attns {
            list.push(tape.value(attn).clone());
        }
    }
    let cat = tape.concat_cols(&mixed);
    (tape.matmul(cat, u_msa), attns)
}

// ── Encoder ──────────────────────────────────────────────────────────────

pub struct EncoderOutput<S> {
    /// `[1 × D]` face embedding: LN of the pooled final token(s).
    pub embedding: TensorId,
    /// Final token matrix `z_L`, before the output LN.
    pub tokens: TensorId,
    pub attention: Option<AttentionRecord<S>>,
}

/// Runs the full pre-LN encoder stack over an embedded token sequence.
pub fn encoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: TensorId,
    ids: &ModelParamIds,
    cfg: &ModelConfig,
    record: bool,
) -> EncoderOutput<S> {
    let mut record_layers = record.then(Vec::new);
    let mut z = tokens;
    for layer in &ids.layers {
        let normed = tape.layer_norm(z, layer.ln1_gamma, layer.ln1_beta);
        let (attended, attns) =
            msa(tape, normed, layer.qkv, layer.qkv_bias, layer.msa, cfg.heads, record);
        z = tape.add(attended, z);
        let normed = tape.layer_norm(z, layer.ln2_gamma, layer.ln2_beta);
        let hidden = tape.matmul(normed, layer.mlp_w1);
        let hidden = tape.add_row_broadcast(hidden, layer.mlp_b1);
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, layer.mlp_w2);
        let out = tape.add_row_broadcast(out, layer.mlp_b2);
        z = tape.add(out, z);
        if let Some(layers) = &mut record_layers {
            layers.push(attns.expect("attention requested but not recorded"));
        }
    }
    let pooled = match cfg.output_mode {
        OutputMode::ClassToken => tape.slice_rows(z, 0, 1),
        OutputMode::MeanPool => {
            let rows = tape.value(z).rows();
            let patch_tokens = tape.slice_rows(z, 1, rows - 1);
            tape.mean_rows(patch_tokens)
        }
    };
    let embedding = tape.layer_norm(pooled, ids.final_ln_gamma, ids.final_ln_beta);
    EncoderOutput {
        embedding,
        tokens: z,
        attention: record_layers.map(|layers| AttentionRecord { layers }),
    }
}

/// Tokenizes one image and runs the encoder without tracking gradients.
pub fn embed_image<S: Scalar>(
    image: &Tensor<S>,
    params: &ModelParams<S>,
    patch_cfg: &PatchConfig,
    model_cfg: &ModelConfig,
    record: bool,
) -> Result<(Tensor<S>, Option<AttentionRecord<S>>)> {
    let mut tape = Tape::new();
    let patches = extract_patches(image, patch_cfg);
    let patches = tape.constant(patches);
    let ids = params.register(&mut tape, false);
    let tokens = crate::tokenizer::embed(
        &mut tape,
        patches,
        ids.patch_embed,
        ids.class_token,
        ids.pos_embed,
    )?;
    let out = encoder_forward(&mut tape, tokens, &ids, model_cfg, record);
    Ok((tape.value(out.embedding).clone(), out.attention))
}
