//! Training loop: AdamW with decoupled weight decay, a linear-warmup
//! cosine learning-rate schedule, 50% horizontal-flip augmentation, and a
//! seeded synthetic-identity dataset for desk-scale runs.
//!
//! Batches are sharded across worker threads against read-only parameters;
//! shard gradients are reduced in shard index order, and a single-threaded
//! run is bitwise reproducible from its seed.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cosface::{cosface_loss, MarginConfig, MarginHead};
use crate::encoder::{encoder_forward, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::tokenizer::{embed, extract_patches, PatchConfig};

// ── Learning-rate schedule ───────────────────────────────────────────────

/// Linear warmup to `base_lr`, then cosine decay to `final_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub final_lr: f64,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize, base_lr: f64, final_lr: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup ({warmup_steps} steps) must end before the run does ({total_steps} steps)"
            )));
        }
        if base_lr < 0.0 || final_lr < 0.0 {
            return Err(Error::Config(format!(
                "learning rates must be non-negative: base {base_lr}, final {final_lr}"
            )));
        }
        Ok(Schedule { warmup_steps, total_steps, base_lr, final_lr })
    }

    /// Learning rate at a step in `[0, total_steps]`: a linear ramp from 0
    /// that reaches `base_lr` exactly at `warmup_steps`, then
    /// `final_lr + 0.5·(base_lr − final_lr)·(1 + cos(π·progress))`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} lies beyond the schedule's {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.final_lr
            + 0.5 * (self.base_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Optimizer steps per epoch for a dataset of `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

// ── AdamW ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment estimates, one pair of arrays per parameter.
pub struct OptimizerState<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    pub step: u64,
    pub cfg: AdamWConfig,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(param_sizes: &[usize], cfg: AdamWConfig) -> Self {
        OptimizerState {
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            step: 0,
            cfg,
        }
    }

    /// One bias-corrected Adam update with decoupled decay: parameters are
    /// first scaled by `1 − lr·wd`, then moved against the moment estimate.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Compat(format!(
                "optimizer tracks {} parameters but got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = S::from_f64(1.0 / (1.0 - self.cfg.beta1.powi(t)));
        let bias2 = S::from_f64(1.0 / (1.0 - self.cfg.beta2.powi(t)));
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let lr_s = S::from_f64(lr);
        let decay = S::from_f64(1.0 - lr * self.cfg.weight_decay);
        for (i, param) in params.iter_mut().enumerate() {
            if param.numel() != self.m[i].len() || grads[i].len() != self.m[i].len() {
                return Err(Error::Compat(format!(
                    "parameter {i} has {} values but the optimizer tracks {}",
                    param.numel(),
                    self.m[i].len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] * bias1;
                let v_hat = v[j] * bias2;
                *p = *p * decay - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ── Augmentation ─────────────────────────────────────────────────────────

/// Mirrors a square `[W, W, C]` image about the vertical axis iff
/// `coin < 0.5`.
pub fn augment_hflip<S: Scalar>(image: &Tensor<S>, coin: f64) -> Tensor<S> {
    if coin >= 0.5 {
        return image.clone();
    }
    let dims = image.shape();
    assert_eq!(dims.len(), 3, "expected a [W, W, C] image, got {dims:?}");
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    assert_eq!(h, w, "horizontal flip expects a square image, got {dims:?}");
    let src = image.data();
    let mut out = vec![S::zero(); src.len()];
    for y in 0..h {
        for x in 0..w {
            let from = (y * w + (w - 1 - x)) * c;
            let to = (y * w + x) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::from_vec(dims.to_vec(), out)
}

// ── Synthetic data ───────────────────────────────────────────────────────

/// Reproducible stand-in for a face dataset: each identity is a random
/// prototype image, and each sample is the prototype shifted by a random
/// integer translation, perturbed with Gaussian noise, and clamped back to
/// `[−1, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub image_side: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub max_translation: usize,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

const PROTO_TAG: u64 = 0x70726f746f;
const SAMPLE_TAG: u64 = 0x73616d706c;
const SHUFFLE_TAG: u64 = 0x73687566;
const FLIP_TAG: u64 = 0x666c6970;

impl SyntheticDataset {
    pub fn new(seed: u64, num_identities: usize, samples_per_identity: usize, image_side: usize) -> Self {
        SyntheticDataset {
            seed,
            num_identities,
            samples_per_identity,
            image_side,
            channels: 1,
            noise_sigma: 0.1,
            max_translation: 2,
        }
    }

    fn prototype<S: Scalar>(&self, id: usize) -> Vec<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, id as u64, PROTO_TAG));
        (0..self.image_side * self.image_side * self.channels)
            .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)))
            .collect()
    }
}

/// Random-access labeled image source for the trainer.
pub trait Dataset<S: Scalar>: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn num_classes(&self) -> usize;
    /// Image `[W, W, C]` in `[−1, 1]` and its identity label.
    fn sample(&self, index: usize) -> (Tensor<S>, usize);
}

impl<S: Scalar> Dataset<S> for SyntheticDataset {
    fn len(&self) -> usize {
        self.num_identities * self.samples_per_identity
    }

    fn num_classes(&self) -> usize {
        self.num_identities
    }

    fn sample(&self, index: usize) -> (Tensor<S>, usize) {
        assert!(index < Dataset::<S>::len(self), "sample {index} out of range");
        let id = index / self.samples_per_identity;
        let k = index % self.samples_per_identity;
        let proto: Vec<S> = self.prototype(id);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, id as u64, SAMPLE_TAG ^ k as u64));
        let t = self.max_translation as i64;
        let dy = rng.gen_range(-t..=t);
        let dx = rng.gen_range(-t..=t);
        let noise = Normal::new(0.0, self.noise_sigma).expect("sigma must be non-negative");
        let (w, c) = (self.image_side, self.channels);
        let mut data = vec![S::zero(); w * w * c];
        for y in 0..w as i64 {
            for x in 0..w as i64 {
                for ch in 0..c {
                    let (sy, sx) = (y - dy, x - dx);
                    let base = if sy >= 0 && sy < w as i64 && sx >= 0 && sx < w as i64 {
                        proto[(sy as usize * w + sx as usize) * c + ch].as_f64()
                    } else {
                        0.0
                    };
                    let v = (base + noise.sample(&mut rng)).clamp(-1.0, 1.0);
                    data[(y as usize * w + x as usize) * c + ch] = S::from_f64(v);
                }
            }
        }
        (Tensor::from_vec(vec![w, w, c], data), id)
    }
}

// ── Training loop ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threads: usize,
    /// 50% horizontal flip on training samples.
    pub augment: bool,
    pub optimizer: AdamWConfig,
    /// Stop once an epoch's training accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
    /// Replaces the cosine decay with the base rate until the given epoch,
    /// then the given constant rate; warmup still ramps.
    pub manual_drop: Option<(usize, f64)>,
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: 64,
            seed: 0,
            threads: 1,
            augment: true,
            optimizer: AdamWConfig::default(),
            stop_at_train_acc: None,
            manual_drop: None,
        }
    }
}

/// One optimizer step as reported in the training CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingReport {
    pub fn final_train_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_acc)
    }

    /// One line per optimizer step.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,step,lr,loss,train_acc")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{},{}", s.epoch, s.step, s.lr, s.loss, s.train_acc)?;
        }
        Ok(())
    }
}

/// Index of the prototype with the highest cosine against the embedding,
/// measured without the training margin.
fn predict_class<S: Scalar>(embedding: &[S], head: &MarginHead<S>) -> usize {
    let dim = head.dim();
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    let e_norm = embedding.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    for class in 0..head.num_classes() {
        let row = &head.weights.data()[class * dim..(class + 1) * dim];
        let mut dot = 0.0;
        let mut w_norm = 0.0;
        for (&e, &w) in embedding.iter().zip(row) {
            dot += e.as_f64() * w.as_f64();
            w_norm += w.as_f64() * w.as_f64();
        }
        let cos = dot / (e_norm * w_norm.sqrt() + f64::MIN_POSITIVE);
        if cos > best_cos {
            best_cos = cos;
            best = class;
        }
    }
    best
}

struct ShardOutcome<S> {
    grads: Vec<Vec<S>>,
    loss_sum: f64,
    correct: usize,
}

/// Forward/backward over one shard of a batch against frozen parameter
/// values; gradients are summed per parameter in sample order.
fn run_shard<S: Scalar, D: Dataset<S> + ?Sized>(
    indices: &[usize],
    model: &ModelParams<S>,
    head: &MarginHead<S>,
    dataset: &D,
    patch_cfg: &PatchConfig,
    model_cfg: &ModelConfig,
    margin_cfg: &MarginConfig,
    cfg: &TrainConfig,
    epoch: usize,
    global_step: usize,
) -> Result<ShardOutcome<S>> {
    let sizes: Vec<usize> = model.flat().iter().map(|t| t.numel()).collect();
    let mut grads: Vec<Vec<S>> =
        sizes.iter().chain([&head.weights.numel()]).map(|&n| vec![S::zero(); n]).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for &index in indices {
        let (image, label) = dataset.sample(index);
        let image = if cfg.augment {
            let coin = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, FLIP_TAG ^ index as u64))
                .gen::<f64>();
            augment_hflip(&image, coin)
        } else {
            image
        };
        let mut tape: Tape<S> = Tape::new();
        let ids = model.register(&mut tape, true);
        let head_id = head.register(&mut tape, true);
        let patches = tape.constant(extract_patches(&image, patch_cfg));
        let tokens = embed(&mut tape, patches, ids.patch_embed, ids.class_token, ids.pos_embed)?;
        let out = encoder_forward(&mut tape, tokens, &ids, model_cfg, false);
        let loss = cosface_loss(&mut tape, out.embedding, head_id, margin_cfg, label)
            .map_err(|e| Error::Numerical(format!("training step {global_step}: {e}")))?;
        let loss_v = tape.value(loss).data()[0].as_f64();
        if !loss_v.is_finite() {
            return Err(Error::Numerical(format!(
                "training step {global_step}: loss became {loss_v} on sample {index}"
            )));
        }
        loss_sum += loss_v;
        if predict_class(tape.value(out.embedding).data(), head) == label {
            correct += 1;
        }
        tape.backward(loss);
        for (slot, id) in ids.flat().iter().chain([&head_id]).enumerate() {
            if let Some(g) = tape.grad(*id) {
                for (acc, &gv) in grads[slot].iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
    }
    Ok(ShardOutcome { grads, loss_sum, correct })
}

/// Runs the full optimization loop, mutating `model` and `head` in place.
///
/// `on_epoch` fires after every epoch with the current parameters, for
/// checkpoint cadence. Loss turning NaN or an embedding collapsing to zero
/// aborts with a diagnostic naming the offending step.
#[allow(clippy::too_many_arguments)]
pub fn train<S: Scalar, D: Dataset<S> + ?Sized, F>(
    model: &mut ModelParams<S>,
    head: &mut MarginHead<S>,
    dataset: &D,
    patch_cfg: &PatchConfig,
    model_cfg: &ModelConfig,
    margin_cfg: &MarginConfig,
    schedule: &Schedule,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainingReport>
where
    F: FnMut(usize, &ModelParams<S>, &MarginHead<S>) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".to_string()));
    }
    if cfg.batch_size == 0 || cfg.threads == 0 || cfg.epochs == 0 {
        return Err(Error::Config(format!(
            "epochs ({}), batch size ({}), and threads ({}) must be positive",
            cfg.epochs, cfg.batch_size, cfg.threads
        )));
    }
    if head.num_classes() < dataset.num_classes() {
        return Err(Error::Compat(format!(
            "head has {} prototypes but the dataset holds {} identities",
            head.num_classes(),
            dataset.num_classes()
        )));
    }

    let n = dataset.len();
    let sizes: Vec<usize> = model
        .flat()
        .iter()
        .map(|t| t.numel())
        .chain([head.weights.numel()])
        .collect();
    let mut optimizer = OptimizerState::new(&sizes, cfg.optimizer);
    let mut report = TrainingReport::default();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, SHUFFLE_TAG));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let lr = match cfg.manual_drop {
                Some((drop_epoch, dropped)) => {
                    if global_step < schedule.warmup_steps {
                        schedule.lr_at(global_step)?
                    } else if epoch < drop_epoch {
                        schedule.base_lr
                    } else {
                        dropped
                    }
                }
                None => schedule.lr_at(global_step)?,
            };

            let shard_count = cfg.threads.min(batch.len());
            let shard_size = batch.len().div_ceil(shard_count);
            let shards: Vec<&[usize]> = batch.chunks(shard_size).collect();
            let outcomes: Vec<Result<ShardOutcome<S>>> = if shard_count <= 1 {
                vec![run_shard(
                    batch, model, head, dataset, patch_cfg, model_cfg, margin_cfg, cfg, epoch,
                    global_step,
                )]
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = shards
                        .iter()
                        .map(|shard| {
                            scope.spawn(|| {
                                run_shard(
                                    shard, model, head, dataset, patch_cfg, model_cfg,
                                    margin_cfg, cfg, epoch, global_step,
                                )
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("shard panicked")).collect()
                })
            };

            let mut batch_grads: Option<Vec<Vec<S>>> = None;
            let mut batch_loss = 0.0;
            let mut batch_correct = 0usize;
            for outcome in outcomes {
                let outcome = outcome?;
                batch_loss += outcome.loss_sum;
                batch_correct += outcome.correct;
                match &mut batch_grads {
                    None => batch_grads = Some(outcome.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&outcome.grads) {
                            for (av, &gv) in a.iter_mut().zip(g) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let mut grads = batch_grads.expect("batch cannot be empty");
            let inv = S::from_f64(1.0 / batch.len() as f64);
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v = *v * inv;
                }
            }

            let mut params = model.flat_mut();
            params.push(&mut head.weights);
            optimizer.step(&mut params, &grads, lr)?;

            let loss = batch_loss / batch.len() as f64;
            let acc = batch_correct as f64 / batch.len() as f64;
            report.steps.push(StepRecord { epoch, step: global_step, lr, loss, train_acc: acc });
            epoch_loss += batch_loss;
            epoch_correct += batch_correct;
            global_step += 1;
        }

        let epoch_record = EpochRecord {
            epoch,
            mean_loss: epoch_loss / n as f64,
            train_acc: epoch_correct as f64 / n as f64,
        };
        log::info!(
            "epoch {}: loss {:.6} train_acc {:.4} lr {:.3e}",
            epoch,
            epoch_record.mean_loss,
            epoch_record.train_acc,
            report.steps.last().map_or(0.0, |s| s.lr)
        );
        report.epochs.push(epoch_record);
        on_epoch(epoch, model, head)?;
        if let Some(target) = cfg.stop_at_train_acc {
            if epoch_record.train_acc >= target {
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::assert_close;

    // ── Schedule ─────────────────────────────────────────────────────

    #[test]
    fn schedule_hits_its_anchor_points() {
        let s = Schedule::new(10, 110, 3e-4, 1e-5).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 3e-4, "warmup must end exactly at the base rate");
        assert_eq!(s.lr_at(110).unwrap(), 1e-5, "decay must end exactly at the final rate");
        assert_close(s.lr_at(60).unwrap(), (3e-4 + 1e-5) / 2.0, 1e-12);
        assert_close(s.lr_at(9).unwrap(), 3e-4 * 0.9, 1e-15);
    }

    #[test]
    fn schedule_is_continuous_and_non_negative() {
        let s = Schedule::new(7, 53, 3e-4, 0.0).unwrap();
        let mut last = 0.0;
        for step in 0..=53 {
            let lr = s.lr_at(step).unwrap();
            assert!(lr >= 0.0, "negative lr {lr} at step {step}");
            if step > 0 {
                assert!(
                    (lr - last).abs() < 3e-4 / 7.0 + 1e-12,
                    "jump from {last} to {lr} at step {step}"
                );
            }
            last = lr;
        }
    }

    #[test]
    fn schedule_rejects_bad_shapes_and_steps() {
        assert!(Schedule::new(10, 10, 3e-4, 0.0).is_err());
        assert!(Schedule::new(0, 10, -1.0, 0.0).is_err());
        let s = Schedule::new(0, 10, 3e-4, 0.0).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 3e-4, "no warmup starts at the base rate");
        assert!(s.lr_at(11).is_err());
    }

    // ── AdamW ────────────────────────────────────────────────────────

    #[test]
    fn zero_gradient_applies_pure_decoupled_decay() {
        let cfg = AdamWConfig { weight_decay: 0.05, ..Default::default() };
        let mut state: OptimizerState<f64> = OptimizerState::new(&[3], cfg);
        let mut p = Tensor::from_vec(vec![3], vec![0.4, -1.25, 7.5]);
        let before = p.data().to_vec();
        state.step(&mut [&mut p], &[vec![0.0; 3]], 1e-3).unwrap();
        for (after, orig) in p.data().iter().zip(&before) {
            assert_eq!(*after, orig * (1.0 - 1e-3 * 0.05), "decay must scale exactly");
        }
    }

    #[test]
    fn three_steps_match_a_hand_rolled_recurrence() {
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 };
        let mut state: OptimizerState<f64> = OptimizerState::new(&[1], cfg);
        let mut p = Tensor::from_vec(vec![1], vec![0.5]);
        let gs = [0.3, -0.2, 0.1];
        let lr = 0.01;

        // Independent straight-line simulation of the same recurrence.
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (i, &g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta = theta * (1.0 - lr * 0.05) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        }

        for &g in &gs {
            state.step(&mut [&mut p], &[vec![g]], lr).unwrap();
        }
        assert_close(p.data()[0], theta, 1e-12);
    }

    #[test]
    fn constant_gradient_update_approaches_sign_times_lr() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for g in [0.7, -0.002] {
            let mut state: OptimizerState<f64> = OptimizerState::new(&[1], cfg);
            let mut p = Tensor::from_vec(vec![1], vec![10.0]);
            let lr = 1e-3;
            let mut delta = 0.0;
            for _ in 0..500 {
                let before = p.data()[0];
                state.step(&mut [&mut p], &[vec![g]], lr).unwrap();
                delta = before - p.data()[0];
            }
            assert_close(delta, g.signum() * lr, 1e-2);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut state: OptimizerState<f64> = OptimizerState::new(&[2], AdamWConfig::default());
        let mut p = Tensor::from_vec(vec![2], vec![1.5, -2.5]);
        state.step(&mut [&mut p], &[vec![0.3, 0.4]], 0.0).unwrap();
        assert_eq!(p.data(), &[1.5, -2.5]);
    }

    #[test]
    fn optimizer_rejects_mismatched_shapes() {
        let mut state: OptimizerState<f64> = OptimizerState::new(&[2], AdamWConfig::default());
        let mut p = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
        let err = state.step(&mut [&mut p], &[vec![0.0; 3]], 1e-3).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    // ── Augmentation ─────────────────────────────────────────────────

    #[test]
    fn forced_flip_swaps_columns_and_is_an_involution() {
        let img = Tensor::from_vec(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let flipped = augment_hflip(&img, 0.0);
        assert_eq!(flipped.data(), &[2.0, 1.0, 4.0, 3.0]);
        let back = augment_hflip(&flipped, 0.0);
        assert_eq!(back.data(), img.data(), "two forced flips must restore the image");
        let kept = augment_hflip(&img, 0.5);
        assert_eq!(kept.data(), img.data(), "coin at 0.5 must not flip");
    }

    #[test]
    fn seeded_coins_flip_about_half_the_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let flips = (0..10_000).filter(|_| rng.gen::<f64>() < 0.5).count();
        let rate = flips as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&rate), "flip rate {rate} outside the binomial bound");
    }

    // ── Synthetic data ───────────────────────────────────────────────

    #[test]
    fn dataset_is_reproducible_and_labeled_in_blocks() {
        let ds = SyntheticDataset::new(42, 3, 4, 8);
        assert_eq!(Dataset::<f64>::len(&ds), 12);
        assert_eq!(Dataset::<f64>::num_classes(&ds), 3);
        let again = SyntheticDataset::new(42, 3, 4, 8);
        for i in 0..12 {
            let (a, la): (Tensor<f64>, _) = ds.sample(i);
            let (b, lb): (Tensor<f64>, _) = again.sample(i);
            assert_eq!(a.data(), b.data(), "sample {i} not reproducible");
            assert_eq!(la, lb);
            assert_eq!(la, i / 4);
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)), "sample {i} out of range");
        }
    }

    #[test]
    fn held_out_sample_indices_share_prototypes() {
        let train = SyntheticDataset::new(7, 2, 6, 8);
        let wider = SyntheticDataset::new(7, 2, 10, 8);
        for id in 0..2 {
            for k in 0..6 {
                let (a, _): (Tensor<f64>, _) = train.sample(id * 6 + k);
                let (b, _): (Tensor<f64>, _) = wider.sample(id * 10 + k);
                assert_eq!(a.data(), b.data(), "identity {id} sample {k} depends on dataset size");
            }
        }
    }

    #[test]
    fn noiseless_untranslated_samples_equal_the_prototype() {
        let mut ds = SyntheticDataset::new(5, 2, 3, 6);
        ds.noise_sigma = 0.0;
        ds.max_translation = 0;
        let (a, _): (Tensor<f64>, _) = ds.sample(0);
        let (b, _): (Tensor<f64>, _) = ds.sample(2);
        assert_eq!(a.data(), b.data(), "sigma 0 and no shift must collapse to the prototype");
        let (other, _): (Tensor<f64>, _) = ds.sample(3);
        assert_ne!(a.data(), other.data(), "different identities must differ");
    }

    // ── Training loop ────────────────────────────────────────────────

    fn toy_setup() -> (PatchConfig, ModelConfig, MarginConfig) {
        let patch = PatchConfig::new(8, 1, 4, 4, 0).unwrap();
        let model = ModelConfig::new(8, 2, 1, 16).unwrap();
        (patch, model, MarginConfig::default())
    }

    #[test]
    fn two_identities_reach_full_train_accuracy() {
        let (patch, model_cfg, margin) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model: ModelParams<f32> = ModelParams::init(&patch, &model_cfg, &mut rng);
        let mut head: MarginHead<f32> = MarginHead::init(2, model_cfg.dim, &mut rng);
        let mut ds = SyntheticDataset::new(3, 2, 8, 8);
        ds.noise_sigma = 0.05;
        ds.max_translation = 0;
        let total = steps_per_epoch(16, 8) * 50;
        let schedule = Schedule::new(4, total, 3e-3, 1e-4).unwrap();
        let mut cfg = TrainConfig::new(50);
        cfg.batch_size = 8;
        cfg.stop_at_train_acc = Some(1.0);
        let report = train(
            &mut model, &mut head, &ds, &patch, &model_cfg, &margin, &schedule, &cfg,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(
            report.final_train_acc(),
            1.0,
            "2-identity toy run should separate fully, got {:?}",
            report.epochs.last()
        );
        assert!(report.epochs.len() <= 50);
        assert!(report.steps.iter().all(|s| s.loss.is_finite()));
    }

    #[test]
    fn lr_trace_equals_the_schedule_pointwise() {
        let (patch, model_cfg, margin) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model: ModelParams<f64> = ModelParams::init(&patch, &model_cfg, &mut rng);
        let mut head: MarginHead<f64> = MarginHead::init(2, model_cfg.dim, &mut rng);
        let ds = SyntheticDataset::new(4, 2, 4, 8);
        let total = steps_per_epoch(8, 4) * 3;
        let schedule = Schedule::new(2, total, 1e-3, 1e-5).unwrap();
        let mut cfg = TrainConfig::new(3);
        cfg.batch_size = 4;
        let report = train(
            &mut model, &mut head, &ds, &patch, &model_cfg, &margin, &schedule, &cfg,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(report.steps.len(), total);
        for s in &report.steps {
            assert_eq!(s.lr, schedule.lr_at(s.step).unwrap(), "lr diverged at step {}", s.step);
        }
    }

    #[test]
    fn manual_drop_holds_base_then_drops() {
        let (patch, model_cfg, margin) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model: ModelParams<f64> = ModelParams::init(&patch, &model_cfg, &mut rng);
        let mut head: MarginHead<f64> = MarginHead::init(2, model_cfg.dim, &mut rng);
        let ds = SyntheticDataset::new(5, 2, 4, 8);
        let total = steps_per_epoch(8, 4) * 4;
        let schedule = Schedule::new(2, total, 3e-4, 0.0).unwrap();
        let mut cfg = TrainConfig::new(4);
        cfg.batch_size = 4;
        cfg.manual_drop = Some((2, 1e-4));
        let report = train(
            &mut model, &mut head, &ds, &patch, &model_cfg, &margin, &schedule, &cfg,
            |_, _, _| Ok(()),
        )
        .unwrap();
        let lrs: Vec<f64> = report.steps.iter().map(|s| s.lr).collect();
        assert_eq!(lrs[0], 0.0);
        assert_eq!(lrs[1], 1.5e-4);
        assert_eq!(lrs[2], 3e-4, "after warmup the base rate holds");
        assert_eq!(lrs[3], 3e-4);
        assert!(lrs[4..].iter().all(|&lr| lr == 1e-4), "drop epoch switches to the low rate");
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_runs() {
        let (patch, model_cfg, margin) = toy_setup();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut model: ModelParams<f32> = ModelParams::init(&patch, &model_cfg, &mut rng);
            let mut head: MarginHead<f32> = MarginHead::init(2, model_cfg.dim, &mut rng);
            let ds = SyntheticDataset::new(8, 2, 6, 8);
            let total = steps_per_epoch(12, 4) * 2;
            let schedule = Schedule::new(1, total, 1e-3, 0.0).unwrap();
            let mut cfg = TrainConfig::new(2);
            cfg.batch_size = 4;
            let report = train(
                &mut model, &mut head, &ds, &patch, &model_cfg, &margin, &schedule, &cfg,
                |_, _, _| Ok(()),
            )
            .unwrap();
            (model, head, report)
        };
        let (m1, h1, r1) = run();
        let (m2, h2, r2) = run();
        for (a, b) in m1.flat().iter().zip(m2.flat()) {
            assert_eq!(a.data(), b.data(), "model drifted between identical runs");
        }
        assert_eq!(h1.weights.data(), h2.weights.data());
        assert_eq!(r1.steps, r2.steps);
    }

    #[test]
    fn sharded_batches_agree_with_single_thread() {
        let (patch, model_cfg, margin) = toy_setup();
        let run = |threads: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut model: ModelParams<f64> = ModelParams::init(&patch, &model_cfg, &mut rng);
            let mut head: MarginHead<f64> = MarginHead::init(2, model_cfg.dim, &mut rng);
            let ds = SyntheticDataset::new(10, 2, 4, 8);
            let schedule = Schedule::new(0, 2, 1e-3, 0.0).unwrap();
            let mut cfg = TrainConfig::new(1);
            cfg.batch_size = 8;
            cfg.threads = threads;
            train(
                &mut model, &mut head, &ds, &patch, &model_cfg, &margin, &schedule, &cfg,
                |_, _, _| Ok(()),
            )
            .unwrap();
            (model, head)
        };
        let (m1, h1) = run(1);
        let (m2, h2) = run(3);
        for (a, b) in m1.flat().iter().zip(m2.flat()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_close(*x, *y, 1e-10);
            }
        }
        for (x, y) in h1.weights.data().iter().zip(h2.weights.data()) {
            assert_close(*x, *y, 1e-10);
        }
    }

    #[test]
    fn collapsed_embedding_aborts_with_the_step_number() {
        let (patch, model_cfg, margin) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model: ModelParams<f64> = ModelParams::init(&patch, &model_cfg, &mut rng);
        for v in model.final_ln_gamma.data_mut() {
            *v = 0.0;
        }
        for v in model.final_ln_beta.data_mut() {
            *v = 0.0;
        }
        let mut head: MarginHead<f64> = MarginHead::init(2, model_cfg.dim, &mut rng);
        let ds = SyntheticDataset::new(12, 2, 4, 8);
        let schedule = Schedule::new(0, 2, 1e-3, 0.0).unwrap();
        let cfg = TrainConfig::new(1);
        let err = train(
            &mut model, &mut head, &ds, &patch, &model_cfg, &margin, &schedule, &cfg,
            |_, _, _| Ok(()),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("step 0"), "diagnostic should name the step: {err}");
    }

    #[test]
    fn epoch_callback_fires_every_epoch_and_csv_has_one_row_per_step() {
        let (patch, model_cfg, margin) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model: ModelParams<f64> = ModelParams::init(&patch, &model_cfg, &mut rng);
        let mut head: MarginHead<f64> = MarginHead::init(2, model_cfg.dim, &mut rng);
        let ds = SyntheticDataset::new(14, 2, 4, 8);
        let total = steps_per_epoch(8, 8) * 3;
        let schedule = Schedule::new(0, total, 1e-3, 0.0).unwrap();
        let mut cfg = TrainConfig::new(3);
        cfg.batch_size = 8;
        let mut seen = Vec::new();
        let report = train(
            &mut model, &mut head, &ds, &patch, &model_cfg, &margin, &schedule, &cfg,
            |epoch, _, _| {
                seen.push(epoch);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,step,lr,loss,train_acc"));
        assert_eq!(lines.count(), report.steps.len());
    }
}
