//! Dataset manifests: labeled image listings for training and pair lists
//! for verification.
//!
//! A training manifest is CSV with rows `relative_path,label_id`; labels
//! must cover `0..K-1` with no gaps. A pairs manifest has rows
//! `path_a,path_b,same` with `same` either 0 or 1. Paths resolve against
//! the manifest file's own directory, `#` starts a comment line, and blank
//! lines are ignored. Images are PPM (P6) or planar raw float32, all of
//! one configured side and channel count.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ppm::load_image;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::Dataset;

// ── Labeled listings ─────────────────────────────────────────────────────

/// One row of a training manifest, with the path already resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_rows(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<(usize, String)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: manifest lists no files", path.display())));
    }
    Ok(rows)
}

/// Parses `relative_path,label_id` rows and checks that every referenced
/// file exists and the labels are contiguous from zero.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let dir = manifest_dir(path);
    let mut entries = Vec::new();
    let mut labels = BTreeSet::new();
    for (line_no, row) in read_rows(path)? {
        let (rel, label) = row.split_once(',').ok_or_else(|| {
            Error::Config(format!(
                "{}:{line_no}: expected `relative_path,label_id`, got `{row}`",
                path.display()
            ))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Config(format!(
                "{}:{line_no}: label `{}` is not a non-negative integer",
                path.display(),
                label.trim()
            ))
        })?;
        let resolved = dir.join(rel.trim());
        if !resolved.is_file() {
            return Err(Error::Config(format!(
                "{}:{line_no}: {} does not exist",
                path.display(),
                resolved.display()
            )));
        }
        labels.insert(label);
        entries.push(ManifestEntry { path: resolved, label });
    }
    for (want, got) in labels.iter().enumerate() {
        if *got != want {
            return Err(Error::Config(format!(
                "{}: labels must cover 0..{} without gaps; {want} is missing",
                path.display(),
                labels.len() - 1
            )));
        }
    }
    Ok(entries)
}

// ── Eagerly loaded image dataset ─────────────────────────────────────────

/// All manifest images decoded up front, normalized to `[−1, 1]`.
pub struct ImageDataset<S> {
    images: Vec<Tensor<S>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<S: Scalar> ImageDataset<S> {
    pub fn load(manifest_path: &Path, side: usize, channels: usize) -> Result<Self> {
        let entries = load_manifest(manifest_path)?;
        let num_classes = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let mut images = Vec::with_capacity(entries.len());
        let mut labels = Vec::with_capacity(entries.len());
        for entry in entries {
            images.push(load_image(&entry.path, side, channels)?);
            labels.push(entry.label);
        }
        Ok(ImageDataset { images, labels, num_classes })
    }
}

impl<S: Scalar> Dataset<S> for ImageDataset<S> {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn sample(&self, index: usize) -> (Tensor<S>, usize) {
        (self.images[index].clone(), self.labels[index])
    }
}

// ── Verification pairs ───────────────────────────────────────────────────

/// One verification pair: two image paths and the ground-truth flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub a: PathBuf,
    pub b: PathBuf,
    pub same: bool,
}

/// Parses `path_a,path_b,same` rows with `same` in {0, 1}.
pub fn load_pairs(path: &Path) -> Result<Vec<PairEntry>> {
    let dir = manifest_dir(path);
    let mut pairs = Vec::new();
    for (line_no, row) in read_rows(path)? {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "{}:{line_no}: expected `path_a,path_b,same`, got `{row}`",
                path.display()
            )));
        }
        let same = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Config(format!(
                    "{}:{line_no}: same flag must be 0 or 1, got `{other}`",
                    path.display()
                )))
            }
        };
        for rel in &fields[0..2] {
            if !dir.join(rel).is_file() {
                return Err(Error::Config(format!(
                    "{}:{line_no}: {} does not exist",
                    path.display(),
                    dir.join(rel).display()
                )));
            }
        }
        pairs.push(PairEntry { a: dir.join(fields[0]), b: dir.join(fields[1]), same });
    }
    Ok(pairs)
}
