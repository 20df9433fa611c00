//! Directory checkpoints: `manifest.json` listing every tensor in order and
//! one little-endian blob per tensor.
//!
//! ```text
//! <dir>/manifest.json        {"format":1,"tensors":[{"name","shape","dtype","file"}]}
//! <dir>/tensors/<name>.bin
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Validation(format!("cannot checkpoint dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Incompatible(format!("unsupported checkpoint dtype '{other}'"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Validation(format!("cannot checkpoint dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], entry: &TensorEntry, path: &Path) -> Result<Tensor> {
    let dtype = parse_dtype(&entry.dtype)?;
    let n: usize = entry.shape.iter().product();
    let width = dtype.size_in_bytes();
    if bytes.len() != n * width {
        return Err(Error::Incompatible(format!(
            "{} holds {} bytes, '{}' of shape {:?} needs {}",
            path.display(),
            bytes.len(),
            entry.name,
            entry.shape,
            n * width
        )));
    }
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
        }
        _ => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
        }
    };
    Ok(t)
}

/// Writes named tensors under `dir`, replacing any previous contents of the
/// manifest.
pub fn save_tensors(dir: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let blobs = dir.join("tensors");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = format!("tensors/{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, tensor_bytes(t)?).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: dtype_name(t.dtype())?.into(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT,
        tensors: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: Manifest = read_json(&path)?;
    if m.format != FORMAT {
        return Err(Error::Incompatible(format!(
            "{} has format {}, expected {FORMAT}",
            path.display(),
            m.format
        )));
    }
    Ok(m)
}

/// Reads every tensor listed in `dir`'s manifest, in manifest order.
pub fn load_tensors(dir: &Path) -> Result<IndexMap<String, Tensor>> {
    let manifest = read_manifest(dir)?;
    let mut out = IndexMap::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.insert(entry.name.clone(), tensor_from_bytes(&bytes, entry, &path)?);
    }
    Ok(out)
}

pub fn save_params(dir: &Path, store: &ParamStore) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = store
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    save_tensors(dir, &tensors)
}

/// Saves only the listed parameters.
pub fn save_selected(dir: &Path, params: &[(String, candle_core::Var)]) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = params.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    save_tensors(dir, &tensors)
}

/// Loads `dir` into `store` in place. Every parameter must be present with a
/// matching shape; `allow_extra` permits checkpoint tensors the store lacks.
pub fn load_params(dir: &Path, store: &ParamStore, allow_extra: bool) -> Result<()> {
    load_params_matching(dir, store, &[""], allow_extra)
}

/// Like [`load_params`], but only parameters whose names start with one of
/// `required` must be present; the others are loaded when the checkpoint
/// has them and otherwise keep their values.
pub fn load_params_matching(dir: &Path, store: &ParamStore, required: &[&str], allow_extra: bool) -> Result<()> {
    let tensors = load_tensors(dir)?;
    for (name, var) in store.iter() {
        let t = match tensors.get(name) {
            Some(t) => t,
            None if !required.iter().any(|p| name.starts_with(p)) => continue,
            None => return Err(Error::Incompatible(format!("checkpoint {} has no parameter '{name}'", dir.display()))),
        };
        if t.dims() != var.dims() {
            return Err(Error::Incompatible(format!(
                "parameter '{name}' has shape {:?} in {} but the model expects {:?}",
                t.dims(),
                dir.display(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    if !allow_extra {
        if let Some(extra) = tensors.keys().find(|k| store.get(k).is_none()) {
            return Err(Error::Incompatible(format!(
                "checkpoint {} has parameter '{extra}' the model lacks",
                dir.display()
            )));
        }
    }
    Ok(())
}

/// SHA-256 over the names, shapes and little-endian bytes of the selected
/// parameters, in order.
pub fn checksum(params: &[(String, candle_core::Var)]) -> Result<String> {
    let mut h = Sha256::new();
    for (name, v) in params {
        h.update(name.as_bytes());
        for d in v.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(tensor_bytes(v.as_tensor())?);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// `<root>/step_<step>` with zero padding so listings sort by step.
pub fn step_dir(root: &Path, step: usize) -> PathBuf {
    root.join(format!("step_{step:07}"))
}
