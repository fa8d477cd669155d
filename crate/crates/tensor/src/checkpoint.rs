//! Parameter checkpoints: a flat little-endian `f32` blob plus a JSON
//! manifest giving each named tensor's shape and byte offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub data_file: String,
    pub total_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined metadata, e.g. the model configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> TensorError {
    TensorError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Paths of the manifest (`<stem>.json`) and blob (`<stem>.bin`).
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `params` next to each other as `<stem>.bin` with `<stem>.json`.
pub fn save<T: Real>(params: &ParamSet<T>, config: serde_json::Value, stem: &Path) -> Result<Manifest> {
    let (manifest_path, data_path) = checkpoint_paths(stem);
    let mut blob = Vec::with_capacity(params.numel() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for p in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for x in p.value.data() {
            blob.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        dtype: "f32-le".to_string(),
        data_file: data_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        total_bytes: blob.len() as u64,
        tensors,
        config,
    };
    fs::write(&data_path, &blob).map_err(io_err(&data_path))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| bad(&manifest_path, e.to_string()))?;
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Reads a checkpoint written by [`save`].
pub fn load<T: Real>(stem: &Path) -> Result<(ParamSet<T>, Manifest)> {
    let (manifest_path, _) = checkpoint_paths(stem);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(&manifest_path, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(bad(&manifest_path, format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != "f32-le" {
        return Err(bad(&manifest_path, format!("unsupported dtype {}", manifest.dtype)));
    }
    let data_path = manifest_path.with_file_name(&manifest.data_file);
    let blob = fs::read(&data_path).map_err(io_err(&data_path))?;
    if blob.len() as u64 != manifest.total_bytes {
        return Err(bad(
            &data_path,
            format!("expected {} bytes, found {}", manifest.total_bytes, blob.len()),
        ));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| bad(&data_path, format!("tensor {} overruns the blob", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?);
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut params = ParamSet::<f32>::new();
        params.insert(
            "a",
            Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0e7]).unwrap(),
        );
        params.insert("b.bias", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        save(&params, serde_json::json!({"hidden": 2}), &stem).unwrap();
        let (back, manifest) = load::<f32>(&stem).unwrap();
        assert_eq!(manifest.config["hidden"], 2);
        assert_eq!(manifest.tensors[1].offset, 16);
        for (x, y) in params.iter().zip(back.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.shape(), y.value.shape());
            let xb: Vec<u32> = x.value.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut params = ParamSet::<f32>::new();
        params.insert("a", Tensor::zeros(&[4]));
        save(&params, serde_json::Value::Null, &stem).unwrap();
        let (_, data) = checkpoint_paths(&stem);
        fs::write(&data, [0u8; 3]).unwrap();
        assert!(matches!(load::<f32>(&stem), Err(TensorError::Checkpoint { .. })));
    }

    #[test]
    fn missing_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let (manifest, _) = checkpoint_paths(&stem);
        fs::write(
            &manifest,
            r#"{"dtype":"f32-le","data_file":"ckpt.bin","total_bytes":0,"tensors":[]}"#,
        )
        .unwrap();
        assert!(load::<f32>(&stem).is_err());
    }
}
