//! Verification metrics and the model profiler.
//!
//! Pair accuracy follows the classic cross-validated protocol: pairs are
//! split into consecutive folds, each fold is scored with the threshold
//! that maximizes accuracy on the remaining folds, and the per-fold
//! accuracies are averaged. TAR@FAR sweeps a shared threshold over genuine
//! and impostor score lists. The profiler reports closed-form parameter
//! and multiply-accumulate counts for a configuration.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::PatchConfig;
use crate::encoder::ModelConfig;

/// FAR targets of the standard 1:1 verification report.
pub const DEFAULT_FAR_TARGETS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

// ── Scoring ──────────────────────────────────────────────────────────────

/// Cosine of the angle between two vectors (shape is ignored beyond length).
pub fn cosine_similarity<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    assert_eq!(a.numel(), b.numel(), "cannot compare embeddings of different widths");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerical(
            "cosine similarity of a zero-norm embedding is undefined".to_string(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// One labeled comparison between two embeddings.
#[derive(Clone, Debug)]
pub struct VerificationPair<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub same: bool,
}

/// Scores every pair by cosine similarity, keeping the labels alongside.
pub fn score_pairs<S: Scalar>(pairs: &[VerificationPair<S>]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(pairs.len());
    let mut same = Vec::with_capacity(pairs.len());
    for pair in pairs {
        scores.push(cosine_similarity(&pair.a, &pair.b)?);
        same.push(pair.same);
    }
    Ok((scores, same))
}

// ── Pair accuracy ────────────────────────────────────────────────────────

/// Outcome of the cross-validated pair-accuracy protocol.
#[derive(Clone, Debug)]
pub struct FoldReport {
    /// Held-out accuracy of each fold.
    pub fold_accuracies: Vec<f64>,
    /// Threshold chosen on the complement of each fold.
    pub thresholds: Vec<f64>,
    /// Unweighted mean of the fold accuracies.
    pub mean_accuracy: f64,
}

fn accuracy_at(scores: &[f64], same: &[bool], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(same)
        .filter(|(&s, &is_same)| (s >= threshold) == is_same)
        .count();
    correct as f64 / scores.len() as f64
}

/// Lowest threshold maximizing accuracy on the given scores.
///
/// Candidates are the sorted unique scores plus a sentinel above the
/// maximum, so "accept none" is reachable; ties break toward the lower
/// threshold.
fn best_threshold(scores: &[f64], same: &[bool]) -> f64 {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    candidates.dedup();
    candidates.push(f64::INFINITY);
    let mut best = f64::INFINITY;
    let mut best_acc = f64::NEG_INFINITY;
    for &t in &candidates {
        let acc = accuracy_at(scores, same, t);
        if acc > best_acc || (acc == best_acc && t < best) {
            best_acc = acc;
            best = t;
        }
    }
    best
}

/// Cross-validated pair accuracy over `folds` consecutive folds; the last
/// fold absorbs the remainder when the pair count does not divide evenly.
pub fn fold_accuracy(scores: &[f64], same: &[bool], folds: usize) -> Result<FoldReport> {
    assert_eq!(scores.len(), same.len(), "every score needs a label");
    if folds < 2 {
        return Err(Error::Config(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if scores.len() < folds {
        return Err(Error::Config(format!(
            "{} pairs cannot fill {folds} folds",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("pair scores contain NaN".to_string()));
    }
    let base = scores.len() / folds;
    let mut fold_accuracies = Vec::with_capacity(folds);
    let mut thresholds = Vec::with_capacity(folds);
    for f in 0..folds {
        let start = f * base;
        let end = if f == folds - 1 { scores.len() } else { start + base };
        let mut train_scores = Vec::with_capacity(scores.len() - (end - start));
        let mut train_same = Vec::with_capacity(train_scores.capacity());
        for i in (0..scores.len()).filter(|i| *i < start || *i >= end) {
            train_scores.push(scores[i]);
            train_same.push(same[i]);
        }
        let t = best_threshold(&train_scores, &train_same);
        thresholds.push(t);
        fold_accuracies.push(accuracy_at(&scores[start..end], &same[start..end], t));
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / folds as f64;
    Ok(FoldReport { fold_accuracies, thresholds, mean_accuracy })
}

/// [`fold_accuracy`] over embeddings instead of precomputed scores.
pub fn fold_accuracy_pairs<S: Scalar>(
    pairs: &[VerificationPair<S>],
    folds: usize,
) -> Result<FoldReport> {
    let (scores, same) = score_pairs(pairs)?;
    fold_accuracy(&scores, &same, folds)
}

// ── TAR at FAR ───────────────────────────────────────────────────────────

/// TAR measured at one FAR target; `tar` is `None` when the impostor list
/// is too small to certify the target.
#[derive(Clone, Copy, Debug)]
pub struct TarReading {
    pub far_target: f64,
    pub tar: Option<f64>,
    pub threshold: Option<f64>,
    /// Impostor acceptance actually reached by the chosen threshold.
    pub achieved_far: Option<f64>,
}

fn fraction_at_or_above(scores: &[f64], t: f64) -> f64 {
    scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64
}

/// True accept rate at each FAR target.
///
/// The threshold is the smallest observed score whose impostor acceptance
/// stays at or under the target; a target finer than `1/|impostors|` is
/// reported as unattainable rather than silently clamped. If every
/// observed score overshoots the target, the threshold moves above the
/// maximum and TAR is 0.
pub fn tar_at_far(
    genuine: &[f64],
    impostor: &[f64],
    far_targets: &[f64],
) -> Result<Vec<TarReading>> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Config(format!(
            "TAR@FAR needs both score lists non-empty, got {} genuine / {} impostor",
            genuine.len(),
            impostor.len()
        )));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::Numerical("verification scores contain NaN".to_string()));
    }
    let mut candidates: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("NaN already rejected"));
    candidates.dedup();
    let resolution = 1.0 / impostor.len() as f64;
    let readings = far_targets
        .iter()
        .map(|&target| {
            if target < resolution {
                return TarReading { far_target: target, tar: None, threshold: None, achieved_far: None };
            }
            let threshold = candidates
                .iter()
                .copied()
                .find(|&t| fraction_at_or_above(impostor, t) <= target)
                .unwrap_or(f64::INFINITY);
            TarReading {
                far_target: target,
                tar: Some(fraction_at_or_above(genuine, threshold)),
                threshold: Some(threshold),
                achieved_far: Some(fraction_at_or_above(impostor, threshold)),
            }
        })
        .collect();
    Ok(readings)
}

// ── Profiler ─────────────────────────────────────────────────────────────

/// Closed-form size and cost of one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelProfile {
    /// Learnable scalars; backbone only unless the head was included.
    pub param_count: u64,
    /// Classification-head parameters, reported separately.
    pub head_param_count: u64,
    /// Multiply-accumulates of one forward pass at sequence length N+1.
    pub mac_count: u64,
}

/// Counts parameters and forward MACs without instantiating any arrays.
///
/// MACs cover the patch projection, the fused qkv projection, both
/// attention contractions, the output projection, and the MLP; softmax,
/// LN, and GELU are excluded. The deployment convention counts backbone
/// parameters only; `include_head` folds the head in.
pub fn profile(
    model: &ModelConfig,
    patch: &PatchConfig,
    head_classes: usize,
    include_head: bool,
) -> ModelProfile {
    let d = model.dim as u64;
    let l = model.depth as u64;
    let mlp = model.mlp_dim as u64;
    let n = patch.num_patches() as u64;
    let t = n + 1;
    let patch_dim = patch.patch_dim() as u64;

    let qkv = d * 3 * d + if model.qkv_bias { 3 * d } else { 0 };
    let per_layer = qkv + d * d + 4 * d + d * mlp + mlp + mlp * d + d;
    let backbone = patch_dim * d + d + t * d + l * per_layer + 2 * d;
    let head = head_classes as u64 * d;

    let layer_macs = t * d * 3 * d + 2 * t * t * d + t * d * d + 2 * t * d * mlp;
    let mut macs = n * patch_dim * d + l * layer_macs;
    if include_head {
        macs += d * head_classes as u64;
    }

    ModelProfile {
        param_count: backbone + if include_head { head } else { 0 },
        head_param_count: head,
        mac_count: macs,
    }
}
