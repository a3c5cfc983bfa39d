use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{normalize_zscore, read_pgm, resize_bilinear, NORMALIZE_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    /// Class index; malignant is the positive class.
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Inbreast,
    Mias,
    Ddsm,
    Synth,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: Label,
    pub source: Source,
}

/// CSV manifest with header `path,label,source`; paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Result<Self> {
        let m = DatasetManifest { root: root.into(), rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::data("manifest has no rows"));
        }
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::data(format!("duplicate manifest path `{}`", r.path)));
            }
        }
        Ok(())
    }

    pub fn has_both_labels(&self) -> bool {
        let first = self.rows[0].label;
        self.rows.iter().any(|r| r.label != first)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "source"] {
            return Err(Error::data(format!("{}: manifest header must be `path,label,source`", path.display())));
        }
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let root = std::fs::canonicalize(parent)?;
        DatasetManifest::new(root, rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest { root: self.root.clone(), rows: indices.iter().map(|&i| self.rows[i].clone()).collect() }
    }
}

/// One model input `[1, S, S]` with its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Tensor,
    pub label: usize,
}

/// Read every image, resize to `size` and optionally z-score normalize.
pub fn load_samples(manifest: &DatasetManifest, size: usize, normalize: bool) -> Result<Vec<Sample>> {
    manifest
        .rows
        .iter()
        .map(|row| {
            let img = read_pgm(&manifest.resolve(row))?;
            let img = resize_bilinear(&img, size, size)?;
            let pixels = if normalize { normalize_zscore(&img, NORMALIZE_EPS) } else { img.pixels().clone() };
            Ok(Sample { id: row.path.clone(), input: pixels.reshape(&[1, size, size])?, label: row.label.index() })
        })
        .collect()
}

/// Stack the chosen samples into `[B, 1, S, S]`.
pub fn batch_tensor(samples: &[Sample], indices: &[usize]) -> Result<Tensor> {
    let first = samples
        .get(*indices.first().ok_or_else(|| Error::data("empty batch"))?)
        .ok_or_else(|| Error::data("batch index out of range"))?;
    let d = first.input.dims().to_vec();
    let mut data = Vec::with_capacity(indices.len() * first.input.numel());
    for &i in indices {
        let s = samples.get(i).ok_or_else(|| Error::data("batch index out of range"))?;
        if s.input.dims() != d.as_slice() {
            return Err(Error::shape(format!("sample {} has shape {}, expected {d:?}", s.id, s.input.shape())));
        }
        data.extend_from_slice(s.input.data());
    }
    let mut dims = vec![indices.len()];
    dims.extend_from_slice(&d);
    Tensor::new(&dims, data)
}

/// Seeded split into `(train, test)` index lists, `round(fraction * n)` train.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut perm = crate::rng::permutation(&mut crate::rng::stream(seed, "split"), n);
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::config(format!("a {fraction} split of {n} samples leaves one side empty")));
    }
    let test = perm.split_off(n_train);
    Ok((perm, test))
}
