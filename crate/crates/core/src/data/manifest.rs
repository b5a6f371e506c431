//! JSON manifest: `{"shape": [...], "mode": "image" | "vector", "samples":
//! [{"path", "identity", "camera"}]}`. Paths are relative to the manifest's
//! directory unless absolute.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, PayloadMode, Sample};
use super::formats::{decode_ppm, decode_qvec, encode_ppm, encode_qvec, read_file};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub identity: u64,
    pub camera: u64,
    /// Row within a multi-vector QVEC blob.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub index: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub shape: Vec<usize>,
    pub mode: PayloadMode,
    pub samples: Vec<ManifestEntry>,
}

pub fn load_manifest<T: Scalar>(path: &Path) -> Result<LabeledDataset<T>> {
    let text = read_file(path)?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut blob_cache: HashMap<PathBuf, Vec<Tensor<T>>> = HashMap::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let file = base.join(&entry.path);
        let payload = match manifest.mode {
            PayloadMode::Image => decode_ppm(&read_file(&file)?, &file)?,
            PayloadMode::Vector => {
                if !blob_cache.contains_key(&file) {
                    let rows = decode_qvec(&read_file(&file)?, &file)?;
                    blob_cache.insert(file.clone(), rows);
                }
                let rows = &blob_cache[&file];
                rows.get(entry.index)
                    .cloned()
                    .ok_or_else(|| Error::MalformedHeader {
                        path: file.clone(),
                        msg: format!("index {} beyond {} vectors", entry.index, rows.len()),
                    })?
            }
        };
        if payload.shape() != manifest.shape {
            return Err(Error::ShapeDisagreement {
                path: file,
                expected: manifest.shape.clone(),
                found: payload.shape().to_vec(),
            });
        }
        samples.push(Sample {
            payload,
            identity: entry.identity,
            camera: entry.camera,
        });
    }
    let mut ds = LabeledDataset::new(manifest.mode, manifest.shape, samples).map_err(|e| {
        Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    })?;
    ds.manifest_path = Some(path.to_path_buf());
    Ok(ds)
}

/// Writes payload files under `dir/samples/` plus `dir/manifest.json`;
/// returns the manifest path.
pub fn save_dataset<T: Scalar>(dataset: &LabeledDataset<T>, dir: &Path) -> Result<PathBuf> {
    let sample_dir = dir.join("samples");
    std::fs::create_dir_all(&sample_dir)?;
    let ext = match dataset.mode() {
        PayloadMode::Image => "ppm",
        PayloadMode::Vector => "qvec",
    };
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let rel = format!("samples/{i:06}.{ext}");
        let bytes = match dataset.mode() {
            PayloadMode::Image => encode_ppm(&s.payload)?,
            PayloadMode::Vector => encode_qvec(&[&s.payload])?,
        };
        std::fs::write(dir.join(&rel), bytes)?;
        entries.push(ManifestEntry {
            path: rel,
            identity: s.identity,
            camera: s.camera,
            index: 0,
        });
    }
    let manifest = Manifest {
        shape: dataset.shape().to_vec(),
        mode: dataset.mode(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}
