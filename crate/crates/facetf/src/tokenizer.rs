//! Sliding-window tokenizer: slides a P×P window with stride S over a
//! zero-padded image, flattens each window, and linearly projects the
//! result into the token sequence fed to the encoder.
//!
//! With stride smaller than the patch side, neighbouring windows overlap,
//! which is the only difference between the stock configurations: the token
//! grid stays 14×14 for patch sides 8, 10, and 12 at stride 8 on a 112 px
//! image once the default padding is applied.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Geometry of the tokenizer: image side `W`, channel count `C`, patch side
/// `P`, stride `S`, and zero padding `p` applied on every border.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Just enough padding to center the overlap: `ceil((P - S) / 2)`, floored
/// at zero when the windows do not overlap.
pub fn default_padding(patch: usize, stride: usize) -> usize {
    if patch <= stride {
        0
    } else {
        (patch - stride).div_ceil(2)
    }
}

impl PatchConfig {
    pub fn new(
        image_side: usize,
        channels: usize,
        patch: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if image_side == 0 || channels == 0 || patch == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "patch geometry must be positive: image_side={image_side} channels={channels} \
                 patch={patch} stride={stride}"
            )));
        }
        if patch > image_side + 2 * padding {
            return Err(Error::Config(format!(
                "patch side {patch} does not fit the padded image of side {}",
                image_side + 2 * padding
            )));
        }
        Ok(PatchConfig { image_side, channels, patch, stride, padding })
    }

    /// Like [`PatchConfig::new`] with `padding = default_padding(P, S)`.
    pub fn with_default_padding(
        image_side: usize,
        channels: usize,
        patch: usize,
        stride: usize,
    ) -> Result<Self> {
        PatchConfig::new(image_side, channels, patch, stride, default_padding(patch, stride))
    }

    /// Window positions per axis: `floor((W + 2p - (P - 1)) / S) + 1`.
    pub fn n_axis(&self) -> usize {
        (self.image_side + 2 * self.padding - (self.patch - 1)) / self.stride + 1
    }

    /// Total patch count `N`, the square of [`PatchConfig::n_axis`].
    pub fn num_patches(&self) -> usize {
        let n = self.n_axis();
        n * n
    }

    /// Flattened window length `P²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Cuts the image into `N` flattened windows, one per row, in raster order
/// over the window grid.
///
/// Each row is laid out row-major over the window with the channel index
/// varying fastest; reads that fall outside the image contribute zeros.
/// The image must have shape `[W, W, C]`.
pub fn extract_patches<S: Scalar>(image: &Tensor<S>, cfg: &PatchConfig) -> Tensor<S> {
    let (w, c) = (cfg.image_side, cfg.channels);
    assert_eq!(
        image.shape(),
        &[w, w, c],
        "image shape {:?} does not match patch config [{w}, {w}, {c}]",
        image.shape()
    );
    let n_axis = cfg.n_axis();
    let p = cfg.padding as isize;
    let side = w as isize;
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    let pixels = image.data();
    for gy in 0..n_axis {
        for gx in 0..n_axis {
            let oy = (gy * cfg.stride) as isize - p;
            let ox = (gx * cfg.stride) as isize - p;
            for dy in 0..cfg.patch as isize {
                let y = oy + dy;
                for dx in 0..cfg.patch as isize {
                    let x = ox + dx;
                    if y >= 0 && y < side && x >= 0 && x < side {
                        let base = ((y * side + x) as usize) * c;
                        data.extend_from_slice(&pixels[base..base + c]);
                    } else {
                        data.extend(std::iter::repeat(S::zero()).take(c));
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

/// Builds the token sequence `[class; patches · E] + E_pos` on the tape.
///
/// `projection` is `[P²C × D]`, `class_token` is `[1 × D]`, and `positions`
/// must have exactly `N + 1` rows; anything else is the signature of a
/// checkpoint trained for a different patch grid.
pub fn embed<S: Scalar>(
    tape: &mut Tape<S>,
    patches: TensorId,
    projection: TensorId,
    class_token: TensorId,
    positions: TensorId,
) -> Result<TensorId> {
    let n = tape.value(patches).rows();
    let pos_rows = tape.value(positions).rows();
    if pos_rows != n + 1 {
        return Err(Error::Compat(format!(
            "position table has {pos_rows} rows but the token sequence has {}",
            n + 1
        )));
    }
    let projected = tape.matmul(patches, projection);
    let sequence = tape.concat_rows(&[class_token, projected]);
    Ok(tape.add(sequence, positions))
}
