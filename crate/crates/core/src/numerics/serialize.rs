//! Flat little-endian parameter blobs with a JSON manifest. Round trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::error::NumericsError;
use super::tensor::Tensor;

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into params.bin.
    pub offset: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct ParamManifest {
    pub params: Vec<ParamEntry>,
}

/// Write `manifest.json` + `params.bin` under `dir`.
pub fn save_params(dir: &Path, named: &[(String, &Tensor)]) -> Result<(), NumericsError> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(named.len());
    for (name, t) in named {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = ParamManifest { params: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

/// Read a manifest + blob pair back into named tensors, in manifest order.
pub fn load_params(dir: &Path) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let manifest: ParamManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let blob = fs::read(dir.join("params.bin"))?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > blob.len() {
            return Err(NumericsError::Manifest(format!(
                "entry {} spans bytes {}..{} but blob has {}",
                e.name,
                e.offset,
                end,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name.clone(), Tensor::from_vec(e.shape.clone(), data)));
    }
    Ok(out)
}
