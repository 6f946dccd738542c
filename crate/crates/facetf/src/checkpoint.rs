//! Binary checkpoint persistence.
//!
//! Layout: 4-byte magic `FTCK`, unsigned 32-bit little-endian format
//! version, unsigned 32-bit little-endian header length, a UTF-8 header of
//! `key = value` lines plus an ordered `tensor <name> <dims>` manifest,
//! then the raw little-endian scalar blobs in manifest order. Everything
//! after the header is positional, so the manifest is validated against
//! the configuration before any blob is read.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::cosface::{MarginConfig, MarginHead};
use crate::encoder::{ModelConfig, ModelParams, OutputMode};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::tokenizer::PatchConfig;

pub const MAGIC: [u8; 4] = *b"FTCK";
pub const VERSION: u32 = 1;

/// Everything the header records besides the tensor manifest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub patch: PatchConfig,
    pub model: ModelConfig,
    pub margin: MarginConfig,
    pub head_classes: usize,
    pub precision: Precision,
}

/// A fully loaded checkpoint, converted to the caller's scalar type.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub meta: CheckpointMeta,
    pub params: ModelParams<S>,
    pub head: MarginHead<S>,
}

// ── Saving ───────────────────────────────────────────────────────────────

fn dims_token(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn render_header<S: Scalar>(
    patch: &PatchConfig,
    model: &ModelConfig,
    margin: &MarginConfig,
    head: &MarginHead<S>,
    tensors: &[(&str, &Tensor<S>)],
) -> String {
    let mut h = String::new();
    h.push_str(&format!("image_side = {}\n", patch.image_side));
    h.push_str(&format!("channels = {}\n", patch.channels));
    h.push_str(&format!("patch = {}\n", patch.patch));
    h.push_str(&format!("stride = {}\n", patch.stride));
    h.push_str(&format!("padding = {}\n", patch.padding));
    h.push_str(&format!("dim = {}\n", model.dim));
    h.push_str(&format!("heads = {}\n", model.heads));
    h.push_str(&format!("depth = {}\n", model.depth));
    h.push_str(&format!("mlp_dim = {}\n", model.mlp_dim));
    h.push_str(&format!("output_mode = {}\n", model.output_mode.name()));
    h.push_str(&format!("qkv_bias = {}\n", model.qkv_bias));
    h.push_str(&format!("scale = {}\n", margin.scale));
    h.push_str(&format!("margin = {}\n", margin.margin));
    h.push_str(&format!("head_classes = {}\n", head.num_classes()));
    h.push_str(&format!("precision = {}\n", S::PRECISION.name()));
    for (name, t) in tensors {
        h.push_str(&format!("tensor {name} {}\n", dims_token(t.shape())));
    }
    h
}

/// Writes model and head parameters with their full configuration.
pub fn save<S: Scalar>(
    path: &Path,
    patch: &PatchConfig,
    model: &ModelConfig,
    margin: &MarginConfig,
    params: &ModelParams<S>,
    head: &MarginHead<S>,
) -> Result<()> {
    if head.dim() != model.dim {
        return Err(Error::Compat(format!(
            "classification head is over {} dimensions but the model emits {}",
            head.dim(),
            model.dim
        )));
    }
    let names = params.names();
    let mut tensors: Vec<(&str, &Tensor<S>)> =
        names.iter().map(String::as_str).zip(params.flat()).collect();
    tensors.push(("head_weights", &head.weights));

    let header = render_header(patch, model, margin, head, &tensors);
    let blob_len: usize = tensors.iter().map(|(_, t)| t.numel() * S::PRECISION.bytes()).sum();
    let mut bytes = Vec::with_capacity(12 + header.len() + blob_len);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ── Header parsing ───────────────────────────────────────────────────────

struct Header {
    meta: CheckpointMeta,
    manifest: Vec<(String, Vec<usize>)>,
}

fn header_err(msg: impl Into<String>) -> Error {
    Error::Compat(format!("checkpoint header: {}", msg.into()))
}

fn parse_header(text: &str) -> Result<Header> {
    let mut keys: HashMap<&str, &str> = HashMap::new();
    let mut manifest = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| header_err("tensor line without a name"))?;
            let dims = parts
                .next()
                .ok_or_else(|| header_err(format!("tensor {name} has no shape")))?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| header_err(format!("tensor {name} has bad shape {dims}")))
                })
                .collect::<Result<_>>()?;
            manifest.push((name.to_string(), shape));
        } else if let Some((k, v)) = line.split_once('=') {
            keys.insert(k.trim(), v.trim());
        } else {
            return Err(header_err(format!("unparseable line `{line}`")));
        }
    }

    let get = |k: &str| keys.get(k).copied().ok_or_else(|| header_err(format!("missing {k}")));
    let int = |k: &str| {
        get(k)?.parse::<usize>().map_err(|_| header_err(format!("{k} is not an integer")))
    };
    let real =
        |k: &str| get(k)?.parse::<f64>().map_err(|_| header_err(format!("{k} is not a number")));

    let patch = PatchConfig::new(
        int("image_side")?,
        int("channels")?,
        int("patch")?,
        int("stride")?,
        int("padding")?,
    )?;
    let mut model = ModelConfig::new(int("dim")?, int("heads")?, int("depth")?, int("mlp_dim")?)?;
    model = model.with_output_mode(
        OutputMode::parse(get("output_mode")?)
            .ok_or_else(|| header_err("unknown output_mode"))?,
    );
    model = model.with_qkv_bias(match get("qkv_bias")? {
        "true" => true,
        "false" => false,
        other => return Err(header_err(format!("qkv_bias must be true/false, got {other}"))),
    });
    let margin = MarginConfig::new(real("scale")?, real("margin")?)?;
    let precision = Precision::parse(get("precision")?)
        .ok_or_else(|| header_err("unknown precision"))?;
    Ok(Header {
        meta: CheckpointMeta { patch, model, margin, head_classes: int("head_classes")?, precision },
        manifest,
    })
}

/// Reads the magic, version, and header of the file at `path` without
/// touching the parameter blobs.
fn read_header(path: &Path) -> Result<(Header, usize)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut fixed = [0u8; 12];
    file.read_exact(&mut fixed).map_err(|e| Error::io(path, e))?;
    if fixed[0..4] != MAGIC {
        return Err(Error::Compat(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Compat(format!(
            "checkpoint format version {version} is not supported (expected {VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(header_bytes).map_err(|_| header_err("not valid UTF-8"))?;
    Ok((parse_header(&text)?, 12 + header_len))
}

/// Reads only the configuration header; used to pick the scalar type
/// before committing to a full load.
pub fn peek_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(read_header(path)?.0.meta)
}

// ── Loading ──────────────────────────────────────────────────────────────

fn decode_blob<S: Scalar>(stored: Precision, chunk: &[u8], out: &mut [S]) {
    let width = stored.bytes();
    match (stored, S::PRECISION) {
        (a, b) if a == b => {
            for (dst, raw) in out.iter_mut().zip(chunk.chunks_exact(width)) {
                *dst = S::read_le(raw);
            }
        }
        _ => {
            for (dst, raw) in out.iter_mut().zip(chunk.chunks_exact(width)) {
                let v = match stored {
                    Precision::F32 => f32::from_le_bytes(raw.try_into().unwrap()) as f64,
                    Precision::F64 => f64::from_le_bytes(raw.try_into().unwrap()),
                };
                *dst = S::from_f64(v);
            }
        }
    }
}

/// Loads a checkpoint into scalar type `S`.
///
/// A float32 file loads into float64 losslessly; the narrowing direction is
/// refused unless `allow_downcast` is set.
pub fn load<S: Scalar>(path: &Path, allow_downcast: bool) -> Result<Checkpoint<S>> {
    let (header, body_start) = read_header(path)?;
    let meta = header.meta;
    let stored = meta.precision;
    if stored.bytes() > S::PRECISION.bytes() && !allow_downcast {
        return Err(Error::Compat(format!(
            "checkpoint stores {stored} but {} was requested; pass --allow-downcast to \
             accept the precision loss",
            S::PRECISION
        )));
    }

    let mut params = ModelParams::<S>::zeros(&meta.patch, &meta.model);
    let mut head = MarginHead::<S>::zeros(meta.head_classes, meta.model.dim);

    // The expected manifest is derived from the configuration alone, so a
    // file whose blob layout disagrees with its own header is caught here.
    let expected_names: Vec<String> = {
        let mut n = params.names();
        n.push("head_weights".to_string());
        n
    };
    if header.manifest.len() != expected_names.len() {
        return Err(Error::Compat(format!(
            "checkpoint manifest lists {} tensors, configuration implies {}",
            header.manifest.len(),
            expected_names.len()
        )));
    }
    {
        let mut slots = params.flat_mut();
        slots.push(&mut head.weights);
        for ((slot, name), (got_name, got_shape)) in
            slots.iter().zip(&expected_names).zip(&header.manifest)
        {
            if got_name != name || got_shape != slot.shape() {
                return Err(Error::Compat(format!(
                    "checkpoint manifest entry `{got_name} {}` does not match expected \
                     `{name} {}`",
                    dims_token(got_shape),
                    dims_token(slot.shape())
                )));
            }
        }
    }

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut offset = body_start;
    let mut slots = params.flat_mut();
    slots.push(&mut head.weights);
    for (slot, name) in slots.into_iter().zip(&expected_names) {
        let need = slot.numel() * stored.bytes();
        let chunk = bytes
            .get(offset..offset + need)
            .ok_or_else(|| Error::Compat(format!("checkpoint truncated inside `{name}`")))?;
        decode_blob(stored, chunk, slot.data_mut());
        offset += need;
    }
    if offset != bytes.len() {
        return Err(Error::Compat(format!(
            "checkpoint has {} trailing bytes after the last tensor",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint { meta, params, head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn toy_configs() -> (PatchConfig, ModelConfig, MarginConfig) {
        let patch = PatchConfig::new(8, 1, 4, 4, 0).unwrap();
        let model = ModelConfig::new(8, 2, 2, 16).unwrap().with_qkv_bias(true);
        (patch, model, MarginConfig::default())
    }

    fn toy_checkpoint<S: Scalar>(seed: u64) -> (PatchConfig, ModelConfig, MarginConfig, ModelParams<S>, MarginHead<S>) {
        let (patch, model, margin) = toy_configs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&patch, &model, &mut rng);
        let head = MarginHead::init(5, model.dim, &mut rng);
        (patch, model, margin, params, head)
    }

    fn tmp(name: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        (dir, path)
    }

    fn assert_bitwise<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what} shape drifted");
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!(
                x.as_f64().to_bits() == y.as_f64().to_bits(),
                "{what}[{i}]: {x} != {y} after round trip"
            );
        }
    }

    #[test]
    fn round_trip_is_bitwise_in_single_precision() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f32>(11);
        let (_dir, path) = tmp("ck.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let loaded = load::<f32>(&path, false).unwrap();
        assert_eq!(loaded.meta.patch, patch);
        assert_eq!(loaded.meta.model, model);
        assert_eq!(loaded.meta.margin, margin);
        assert_eq!(loaded.meta.head_classes, 5);
        assert_eq!(loaded.meta.precision, Precision::F32);
        for ((a, b), name) in
            params.flat().iter().zip(loaded.params.flat()).zip(params.names())
        {
            assert_bitwise(a, b, &name);
        }
        assert_bitwise(&head.weights, &loaded.head.weights, "head_weights");
    }

    #[test]
    fn round_trip_is_bitwise_in_double_precision() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f64>(12);
        let (_dir, path) = tmp("ck64.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let loaded = load::<f64>(&path, false).unwrap();
        assert_eq!(loaded.meta.precision, Precision::F64);
        for ((a, b), name) in
            params.flat().iter().zip(loaded.params.flat()).zip(params.names())
        {
            assert_bitwise(a, b, &name);
        }
        assert_bitwise(&head.weights, &loaded.head.weights, "head_weights");
    }

    #[test]
    fn file_leads_with_magic_version_and_readable_header() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f32>(13);
        let (_dir, path) = tmp("probe.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"FTCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        assert!(header.contains("precision = f32"), "header was:\n{header}");
        assert!(header.contains("tensor patch_embed 16x8"), "header was:\n{header}");
        assert!(header.contains("tensor head_weights 5x8"), "header was:\n{header}");
    }

    #[test]
    fn upcast_from_single_to_double_is_lossless() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f32>(14);
        let (_dir, path) = tmp("up.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let loaded = load::<f64>(&path, false).unwrap();
        assert_eq!(loaded.meta.precision, Precision::F32);
        for (a, b) in params.flat().iter().zip(loaded.params.flat()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f64, *y, "widening must be exact");
            }
        }
    }

    #[test]
    fn downcast_needs_the_explicit_flag() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f64>(15);
        let (_dir, path) = tmp("down.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let err = load::<f32>(&path, false).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("--allow-downcast"), "got: {err}");

        let loaded = load::<f32>(&path, true).unwrap();
        for (a, b) in params.flat().iter().zip(loaded.params.flat()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y, "narrowing must round once");
            }
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f32>(16);
        let (_dir, path) = tmp("bad.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load::<f32>(&path, false).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("not a checkpoint"), "got: {err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f32>(17);
        let (_dir, path) = tmp("v2.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load::<f32>(&path, false).unwrap_err();
        assert!(err.to_string().contains("version 2"), "got: {err}");
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f32>(18);
        let (_dir, path) = tmp("cut.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load::<f32>(&path, false).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");

        fs::write(&path, &bytes[..20]).unwrap();
        assert!(load::<f32>(&path, false).is_err(), "header cut short must fail");

        let mut longer = bytes.clone();
        longer.push(0);
        fs::write(&path, &longer).unwrap();
        let err = load::<f32>(&path, false).unwrap_err();
        assert!(err.to_string().contains("trailing"), "got: {err}");
    }

    #[test]
    fn manifest_name_drift_is_rejected() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f32>(19);
        let (_dir, path) = tmp("drift.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let bytes = fs::read(&path).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + hlen].to_vec()).unwrap();
        // Same length, different name, so offsets stay valid.
        let tampered = header.replace("tensor class_token", "tensor class_tokem");
        assert_ne!(header, tampered);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[12 + hlen..]);
        fs::write(&path, &out).unwrap();
        let err = load::<f32>(&path, false).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("class_tokem"), "got: {err}");
    }

    #[test]
    fn peek_reads_config_without_needing_the_blobs() {
        let (patch, model, margin, params, head) = toy_checkpoint::<f32>(20);
        let (_dir, path) = tmp("peek.ftck");
        save(&path, &patch, &model, &margin, &params, &head).unwrap();
        let bytes = fs::read(&path).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        fs::write(&path, &bytes[..12 + hlen]).unwrap();
        let meta = peek_meta(&path).unwrap();
        assert_eq!(meta.patch, patch);
        assert_eq!(meta.model, model);
        assert_eq!(meta.margin, margin);
        assert_eq!(meta.head_classes, 5);
        assert_eq!(meta.precision, Precision::F32);
    }

    #[test]
    fn head_dimension_mismatch_is_refused_at_save_time() {
        let (patch, model, margin, params, _) = toy_checkpoint::<f32>(21);
        let wrong = MarginHead::<f32>::zeros(5, model.dim + 1);
        let (_dir, path) = tmp("never.ftck");
        let err = save(&path, &patch, &model, &margin, &params, &wrong).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(!path.exists(), "nothing may be written on a refused save");
    }
}
