//! Large-margin cosine head: embeddings and class prototypes are projected
//! onto the unit hypersphere, a fixed margin is carved out of the target
//! cosine, and everything is rescaled before the softmax cross-entropy.
//!
//! For label `y` the logit vector is `s·(cos θ_j − m·[j = y])`, so the
//! network must beat every rival class by the margin `m` in cosine space.

use rand::Rng;

use crate::encoder::truncated_normal_fill;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Floor added to row norms during normalization; keeps an all-zero row
/// finite instead of producing NaN.
pub const NORM_EPS: f64 = 1e-12;

/// Scale `s` and margin `m` of the cosine loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig { scale: 64.0, margin: 0.35 }
    }
}

impl MarginConfig {
    pub fn new(scale: f64, margin: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("logit scale must be positive, got {scale}")));
        }
        if !(0.0..1.0).contains(&margin) {
            return Err(Error::Config(format!("cosine margin must lie in [0, 1), got {margin}")));
        }
        Ok(MarginConfig { scale, margin })
    }
}

/// One prototype row per identity, `[classes × dim]`.
#[derive(Clone, Debug)]
pub struct MarginHead<S> {
    pub weights: Tensor<S>,
}

impl<S: Scalar> MarginHead<S> {
    pub fn init<R: Rng>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let mut weights = Tensor::zeros(vec![classes, dim]);
        truncated_normal_fill(weights.data_mut(), 0.02, rng);
        MarginHead { weights }
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        MarginHead { weights: Tensor::zeros(vec![classes, dim]) }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> TensorId {
        if trainable {
            tape.leaf(self.weights.clone().into_param())
        } else {
            tape.constant(self.weights.clone())
        }
    }
}

fn reject_zero_rows<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<()> {
    let cols = t.cols();
    for i in 0..t.rows() {
        let norm_sq: S = t.data()[i * cols..(i + 1) * cols].iter().map(|&v| v * v).sum();
        if norm_sq == S::zero() {
            return Err(Error::Numerical(format!(
                "{what} row {i} has zero norm; its direction on the hypersphere is undefined"
            )));
        }
    }
    Ok(())
}

/// Margined, scaled logits `s·(cos θ_j − m·[j = label])` for one `[1 × dim]`
/// embedding against a `[classes × dim]` prototype matrix.
pub fn cosface_logits<S: Scalar>(
    tape: &mut Tape<S>,
    embedding: TensorId,
    weights: TensorId,
    cfg: &MarginConfig,
    label: usize,
) -> Result<TensorId> {
    let classes = tape.value(weights).rows();
    assert!(label < classes, "label {label} out of range for {classes} classes");
    assert_eq!(tape.value(embedding).rows(), 1, "expected a single embedding row");
    assert_eq!(
        tape.value(embedding).cols(),
        tape.value(weights).cols(),
        "embedding width {} does not match prototype width {}",
        tape.value(embedding).cols(),
        tape.value(weights).cols()
    );
    reject_zero_rows(tape.value(embedding), "embedding")?;
    reject_zero_rows(tape.value(weights), "prototype")?;

    let eps = S::from_f64(NORM_EPS);
    let e_hat = tape.l2_normalize_rows(embedding, eps);
    let w_hat = tape.l2_normalize_rows(weights, eps);
    let w_t = tape.transpose(w_hat);
    let cos = tape.matmul(e_hat, w_t);
    let margined = tape.sub_at_index(cos, label, S::from_f64(cfg.margin));
    Ok(tape.scale(margined, S::from_f64(cfg.scale)))
}

/// Per-sample training loss: cross-entropy over the margined logits.
pub fn cosface_loss<S: Scalar>(
    tape: &mut Tape<S>,
    embedding: TensorId,
    weights: TensorId,
    cfg: &MarginConfig,
    label: usize,
) -> Result<TensorId> {
    let logits = cosface_logits(tape, embedding, weights, cfg, label)?;
    Ok(tape.cross_entropy(logits, label))
}
