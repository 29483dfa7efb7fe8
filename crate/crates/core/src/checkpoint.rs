//! Checkpoint container: a directory holding `manifest.json` plus one
//! binary file per named tensor.
//!
//! Tensor files are little-endian: the magic `HVQT`, a `u32` rank, one `u64`
//! per dimension, then the row-major `f32` payload. Parameters are kept
//! exactly representable in `f32`, so a save/load round trip is bit-exact.
//! Writes go to a sibling temporary directory that is renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{ConditioningMask, ModuleSpec, Scale, VqModule};
use crate::nn::Parameterized;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const TENSOR_MAGIC: &[u8; 4] = b"HVQT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub scale: Scale,
    pub spec: ModuleSpec,
    pub singer_ids: Vec<u32>,
    pub iterations: u64,
    pub mask: ConditioningMask,
    /// Snapshot of the configuration the module was trained with.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_tensor(shape: &[usize], values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * shape.len() + 4 * values.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bad = |why: &str| ckpt_err(path, why.to_string());
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("not a tensor file"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated shape header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((shape, values))
}

/// Writes `module` to `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint(dir: &Path, module: &VqModule, config: serde_json::Value) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| ckpt_err(dir, "checkpoint path has no final component"))?
        .to_string_lossy()
        .into_owned();
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut tensors = Vec::new();
    for (name, p) in module.named_params() {
        let file = format!("{name}.bin");
        let path = tmp.join(&file);
        fs::write(&path, encode_tensor(&p.shape, &p.value)).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: p.shape.clone(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        scale: module.spec.scale,
        spec: module.spec.clone(),
        singer_ids: module.singers.ids(),
        iterations: module.iterations,
        mask: module.mask,
        config,
        tensors,
    };
    let path = tmp.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let old = parent.join(format!(".{name}.old-{}", std::process::id()));
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(ckpt_err(dir, "no checkpoint found (manifest.json missing)"));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| ckpt_err(&path, format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            &path,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

/// Loads a module saved by [`save_checkpoint`]; every tensor of the
/// architecture must be present with its exact shape.
pub fn load_checkpoint(dir: &Path) -> Result<(VqModule, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(dir)?;
    if manifest.spec.scale != manifest.scale {
        return Err(ckpt_err(
            dir,
            "scale tag disagrees with the stored module spec",
        ));
    }
    let mut module = VqModule::new(manifest.spec.clone(), &manifest.singer_ids, 0)?;
    module.iterations = manifest.iterations;
    module.mask = manifest.mask;
    let mut params = module.named_params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(ckpt_err(
            dir,
            format!(
                "{} tensors stored, architecture has {}",
                manifest.tensors.len(),
                params.len()
            ),
        ));
    }
    for (name, p) in params.iter_mut() {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| ckpt_err(dir, format!("tensor {name} missing")))?;
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (shape, values) = decode_tensor(&bytes, &path)?;
        if shape != p.shape || shape != entry.shape {
            return Err(ckpt_err(
                &path,
                format!("shape {shape:?} does not match expected {:?}", p.shape),
            ));
        }
        p.value = values;
    }
    Ok((module, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_codec_round_trip() {
        let v = vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 0.0, 7.0];
        let bytes = encode_tensor(&[2, 3], &v);
        assert_eq!(bytes.len(), 8 + 16 + 24);
        let (shape, back) = decode_tensor(&bytes, Path::new("t")).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(back, v);
        assert!(decode_tensor(&bytes[..bytes.len() - 1], Path::new("t")).is_err());
        assert!(decode_tensor(b"nope", Path::new("t")).is_err());
    }
}
