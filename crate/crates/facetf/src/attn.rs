//! Attention analysis: rollout of the modified attention matrices,
//! per-head mean attention distance in pixel space, and a heatmap overlay
//! exporter.
//!
//! Rollout averages each layer's heads into `Ā` and accumulates
//! `M ← (0.5·Ā + 0.5·I)·M` from the first layer to the last, starting at
//! the identity; the class-token row of `M` (class column dropped) is the
//! per-patch relevance map.

use std::io::Write;
use std::path::Path;

use crate::encoder::AttentionRecord;
use crate::error::{Error, Result};
use crate::ppm::write_ppm;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::PatchConfig;

// ── Rollout ──────────────────────────────────────────────────────────────

/// Cumulative attention flow through the whole stack.
#[derive(Clone, Debug)]
pub struct RolloutMap<S> {
    /// `(N+1)×(N+1)` accumulated matrix; rows sum to 1.
    pub matrix: Tensor<S>,
    /// Class-token attention over the `N` patches, renormalized to sum 1;
    /// all zeros when the class token only ever attended to itself.
    pub class_row: Tensor<S>,
    /// Set when `class_row` was zeroed out as degenerate.
    pub degenerate: bool,
}

/// Accumulates `(0.5·Ā + 0.5·I)` products over all recorded layers.
///
/// `expected_layers` is the encoder depth; a record with fewer (or more)
/// layers is rejected as incomplete rather than silently analyzed.
pub fn rollout<S: Scalar>(
    record: &AttentionRecord<S>,
    expected_layers: usize,
) -> Result<RolloutMap<S>> {
    if record.num_layers() != expected_layers {
        return Err(Error::Compat(format!(
            "attention record holds {} layers but the model has {expected_layers}",
            record.num_layers()
        )));
    }
    let t = record.seq_len();
    if t == 0 {
        return Err(Error::Compat("attention record is empty".to_string()));
    }
    let half = S::from_f64(0.5);
    // M starts as the identity.
    let mut m = vec![S::zero(); t * t];
    for i in 0..t {
        m[i * t + i] = S::one();
    }
    for (l, heads) in record.layers.iter().enumerate() {
        if heads.is_empty() {
            return Err(Error::Compat(format!("layer {l} recorded no attention heads")));
        }
        let inv_heads = S::from_f64(1.0 / heads.len() as f64);
        let mut modified = vec![S::zero(); t * t];
        for head in heads {
            if head.rows() != t || head.cols() != t {
                return Err(Error::Compat(format!(
                    "layer {l} attention is {:?}, expected {t}x{t}",
                    head.shape()
                )));
            }
            for (dst, &src) in modified.iter_mut().zip(head.data()) {
                *dst += src * inv_heads;
            }
        }
        for v in modified.iter_mut() {
            *v = *v * half;
        }
        for i in 0..t {
            modified[i * t + i] = modified[i * t + i] + half;
        }
        // M ← modified · M.
        let mut next = vec![S::zero(); t * t];
        for i in 0..t {
            for k in 0..t {
                let a = modified[i * t + k];
                if a == S::zero() {
                    continue;
                }
                for j in 0..t {
                    next[i * t + j] = next[i * t + j] + a * m[k * t + j];
                }
            }
        }
        m = next;
    }

    let class_patches: Vec<S> = m[1..t].to_vec();
    let mass: S = class_patches.iter().copied().sum();
    let (class_row, degenerate) = if mass.as_f64() <= 0.0 {
        log::warn!("class token never attended to any patch; relevance map is all zero");
        (vec![S::zero(); t - 1], true)
    } else {
        (class_patches.iter().map(|&v| v / mass).collect(), false)
    };
    Ok(RolloutMap {
        matrix: Tensor::from_vec(vec![t, t], m),
        class_row: Tensor::from_vec(vec![t - 1], class_row),
        degenerate,
    })
}

// ── Mean attention distance ──────────────────────────────────────────────

/// Mean attention distance of one head, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceEntry {
    pub layer: usize,
    pub head: usize,
    pub mean_distance_px: f64,
}

/// Per-layer, per-head receptive-field summary.
#[derive(Clone, Debug, Default)]
pub struct DistanceProfile {
    pub entries: Vec<DistanceEntry>,
}

impl DistanceProfile {
    /// `layer,head,mean_distance_px` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,head,mean_distance_px")?;
        for e in &self.entries {
            writeln!(w, "{},{},{}", e.layer, e.head, e.mean_distance_px)?;
        }
        Ok(())
    }
}

/// Pixel-space center of each patch in raster order.
fn patch_centers(cfg: &PatchConfig) -> Vec<(f64, f64)> {
    let n_axis = cfg.n_axis();
    let mut centers = Vec::with_capacity(n_axis * n_axis);
    for row in 0..n_axis {
        for col in 0..n_axis {
            let y = (row * cfg.stride) as f64 - cfg.padding as f64 + cfg.patch as f64 / 2.0;
            let x = (col * cfg.stride) as f64 - cfg.padding as f64 + cfg.patch as f64 / 2.0;
            centers.push((y, x));
        }
    }
    centers
}

/// Attention-weighted Euclidean distance between patch centers, averaged
/// over the `N` patch-token queries; the class token carries no image
/// position and is excluded.
pub fn mean_attention_distance<S: Scalar>(
    record: &AttentionRecord<S>,
    cfg: &PatchConfig,
) -> Result<DistanceProfile> {
    let n = cfg.num_patches();
    let t = record.seq_len();
    if t != n + 1 {
        return Err(Error::Compat(format!(
            "attention is over {t} tokens but the patch grid gives {}",
            n + 1
        )));
    }
    let centers = patch_centers(cfg);
    let mut profile = DistanceProfile::default();
    for (layer, heads) in record.layers.iter().enumerate() {
        for (head, attn) in heads.iter().enumerate() {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let w = attn.at(i + 1, j + 1).as_f64();
                    if w == 0.0 {
                        continue;
                    }
                    let dy = centers[i].0 - centers[j].0;
                    let dx = centers[i].1 - centers[j].1;
                    total += w * (dy * dy + dx * dx).sqrt();
                }
            }
            profile.entries.push(DistanceEntry {
                layer,
                head,
                mean_distance_px: total / n as f64,
            });
        }
    }
    Ok(profile)
}

// ── Heatmap export ───────────────────────────────────────────────────────

/// Bilinear sample of an `n×n` grid at fractional coordinates, with the
/// half-pixel convention (output pixel centers map into the grid).
fn bilinear(grid: &[f64], n: usize, y: f64, x: f64) -> f64 {
    let clamp = |v: f64| v.clamp(0.0, (n - 1) as f64);
    let (y, x) = (clamp(y), clamp(x));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = grid[y0 * n + x0] * (1.0 - fx) + grid[y0 * n + x1] * fx;
    let bot = grid[y1 * n + x0] * (1.0 - fx) + grid[y1 * n + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Cold-to-hot color for a heat value in `[0, 1]`: blue through gray to red.
fn heat_color(h: f64) -> (f64, f64, f64) {
    (h, 0.25, 1.0 - h)
}

/// Renders the class-token relevance map over the face image as a PPM.
///
/// The `N`-entry row is reshaped to the patch grid, bilinearly upsampled to
/// the image size, min-max normalized (a constant map becomes 0.5
/// everywhere), and alpha-blended at 0.5 over the grayscale image.
pub fn export_heatmap<S: Scalar>(
    class_row: &Tensor<S>,
    image: &Tensor<S>,
    cfg: &PatchConfig,
    path: &Path,
) -> Result<()> {
    let n_axis = cfg.n_axis();
    let n = cfg.num_patches();
    if class_row.numel() != n {
        return Err(Error::Compat(format!(
            "relevance map has {} entries but the grid holds {n} patches",
            class_row.numel()
        )));
    }
    let dims = image.shape();
    if dims.len() != 3 || dims[0] != cfg.image_side || dims[1] != cfg.image_side {
        return Err(Error::Compat(format!(
            "image of shape {dims:?} does not match the {0}x{0} config",
            cfg.image_side
        )));
    }
    let (w, c) = (dims[0], dims[2]);

    let grid: Vec<f64> = class_row.data().iter().map(|v| v.as_f64()).collect();
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let normalized: Vec<f64> = if span <= 0.0 {
        vec![0.5; grid.len()]
    } else {
        grid.iter().map(|v| (v - lo) / span).collect()
    };

    let mut rgb = vec![0u8; 3 * w * w];
    let scale = n_axis as f64 / w as f64;
    for y in 0..w {
        for x in 0..w {
            let heat = bilinear(
                &normalized,
                n_axis,
                (y as f64 + 0.5) * scale - 0.5,
                (x as f64 + 0.5) * scale - 0.5,
            );
            let mut gray = 0.0;
            for ch in 0..c {
                gray += image.data()[(y * w + x) * c + ch].as_f64();
            }
            // Image values live in [−1, 1]; fold to [0, 1] gray.
            let gray = ((gray / c as f64) + 1.0) / 2.0;
            let (hr, hg, hb) = heat_color(heat);
            let px = &mut rgb[3 * (y * w + x)..3 * (y * w + x) + 3];
            px[0] = ((0.5 * gray + 0.5 * hr).clamp(0.0, 1.0) * 255.0).round() as u8;
            px[1] = ((0.5 * gray + 0.5 * hg).clamp(0.0, 1.0) * 255.0).round() as u8;
            px[2] = ((0.5 * gray + 0.5 * hb).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    write_ppm(path, w, w, &rgb)
}
