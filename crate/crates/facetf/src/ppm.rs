//! Binary PPM (P6) reading and writing, plus a planar raw float32 image
//! loader. 8-bit pixels map to the model's `[−1, 1]` range via
//! `(v − 127.5)/128`; float files are taken as already normalized.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Writes interleaved 8-bit RGB rows as a binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * width * height, "pixel buffer does not match {width}x{height}");
    let mut out = Vec::with_capacity(rgb.len() + 32);
    write!(out, "P6\n{width} {height}\n255\n").expect("in-memory write cannot fail");
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn is_ppm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

/// Consumes whitespace and `#` comments, then parses one ASCII integer.
fn next_int(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<usize> {
    loop {
        while *pos < bytes.len() && is_ppm_space(bytes[*pos]) {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Compat(format!("{}: malformed PPM header", path.display())));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Compat(format!("{}: malformed PPM header", path.display())))
}

/// Reads a binary PPM, returning width, height, and interleaved RGB bytes.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::Compat(format!("{}: not a binary PPM (P6)", path.display())));
    }
    let mut pos = 2;
    let width = next_int(&bytes, &mut pos, path)?;
    let height = next_int(&bytes, &mut pos, path)?;
    let maxval = next_int(&bytes, &mut pos, path)?;
    if maxval != 255 {
        return Err(Error::Compat(format!(
            "{}: only 8-bit PPMs are supported, maxval is {maxval}",
            path.display()
        )));
    }
    if pos >= bytes.len() || !is_ppm_space(bytes[pos]) {
        return Err(Error::Compat(format!("{}: malformed PPM header", path.display())));
    }
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() - pos < need {
        return Err(Error::Compat(format!(
            "{}: pixel data truncated, expected {need} bytes, found {}",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

/// Maps one 8-bit channel value into `[−1, 1]`.
pub fn normalize_u8(v: u8) -> f64 {
    (v as f64 - 127.5) / 128.0
}

/// Loads one image as a `[side, side, channels]` tensor in `[−1, 1]`.
///
/// `.ppm` files must be square with the given side; a 3-channel PPM feeds
/// a 1-channel model by averaging to gray. Any other extension is read as
/// planar raw little-endian float32: `channels` planes of `side × side`
/// values, already normalized.
pub fn load_image<S: Scalar>(path: &Path, side: usize, channels: usize) -> Result<Tensor<S>> {
    let is_ppm = path.extension().map_or(false, |e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let (w, h, rgb) = read_ppm(path)?;
        if w != side || h != side {
            return Err(Error::Compat(format!(
                "{}: image is {w}x{h} but the model expects {side}x{side}",
                path.display()
            )));
        }
        let mut data = vec![S::zero(); side * side * channels];
        match channels {
            3 => {
                for (i, px) in rgb.iter().enumerate() {
                    data[i] = S::from_f64(normalize_u8(*px));
                }
            }
            1 => {
                for p in 0..side * side {
                    let gray = (rgb[3 * p] as f64 + rgb[3 * p + 1] as f64 + rgb[3 * p + 2] as f64)
                        / 3.0;
                    data[p] = S::from_f64((gray - 127.5) / 128.0);
                }
            }
            c => {
                return Err(Error::Compat(format!(
                    "{}: PPM provides 3 channels, cannot feed a {c}-channel model",
                    path.display()
                )))
            }
        }
        Ok(Tensor::from_vec(vec![side, side, channels], data))
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let need = side * side * channels * 4;
        if bytes.len() != need {
            return Err(Error::Compat(format!(
                "{}: raw float file holds {} bytes, expected {need} for {side}x{side}x{channels}",
                path.display(),
                bytes.len()
            )));
        }
        let plane = side * side;
        let mut data = vec![S::zero(); plane * channels];
        for ch in 0..channels {
            for p in 0..plane {
                let off = (ch * plane + p) * 4;
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4-byte chunk"));
                data[p * channels + ch] = S::from_f64(v as f64);
            }
        }
        Ok(Tensor::from_vec(vec![side, side, channels], data))
    }
}
