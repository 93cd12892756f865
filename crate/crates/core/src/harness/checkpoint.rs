//! Checkpoint container: a JSON manifest followed by the raw little-endian
//! f32 parameter arrays and packed mask bitsets. Every tensor, every mask and
//! both regions carry sha-256 checksums; loading verifies all of them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::sha256_hex;
use crate::params::ParamSet;
use crate::pruning::PruneMask;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDLCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path} is corrupt: {what}")]
    Corrupt { path: String, what: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    name: String,
    numel: u64,
    offset: u64,
    popcount: u64,
    checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    params: Vec<ParamEntry>,
    masks: Vec<MaskEntry>,
    params_region_checksum: String,
    masks_region_checksum: String,
}

fn pack_bits(mask: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &bit) in mask.iter().enumerate() {
        if bit != 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], numel: usize) -> Vec<u8> {
    (0..numel).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet<f32>,
    mask: &PruneMask,
) -> Result<(), CheckpointError> {
    let mut param_entries = Vec::new();
    let mut params_region = Vec::new();
    for (name, tensor) in params.iter() {
        let offset = params_region.len() as u64;
        let mut bytes = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        param_entries.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            checksum: sha256_hex(&bytes),
        });
        params_region.extend_from_slice(&bytes);
    }

    let mut mask_entries = Vec::new();
    let mut masks_region = Vec::new();
    for (name, bits) in mask.iter() {
        let offset = masks_region.len() as u64;
        let packed = pack_bits(bits);
        mask_entries.push(MaskEntry {
            name: name.clone(),
            numel: bits.len() as u64,
            offset,
            popcount: bits.iter().filter(|&&b| b == 1).count() as u64,
            checksum: sha256_hex(&packed),
        });
        masks_region.extend_from_slice(&packed);
    }

    let manifest = Manifest {
        version: 1,
        dtype: "f32".to_string(),
        params: param_entries,
        masks: mask_entries,
        params_region_checksum: sha256_hex(&params_region),
        masks_region_checksum: sha256_hex(&masks_region),
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| CheckpointError::Corrupt { path: path.display().to_string(), what: e.to_string() })?;

    let mut file = Vec::with_capacity(8 + 8 + manifest_json.len() + params_region.len() + masks_region.len());
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest_json);
    file.extend_from_slice(&params_region);
    file.extend_from_slice(&masks_region);

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &file)
        .map_err(|e| CheckpointError::Io { path: tmp.display().to_string(), source: e })?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f32>, PruneMask), CheckpointError> {
    let p = path.display().to_string();
    let corrupt = |what: String| CheckpointError::Corrupt { path: p.clone(), what };
    let bytes = std::fs::read(path)
        .map_err(|e| CheckpointError::Io { path: p.clone(), source: e })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(corrupt("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| corrupt(format!("manifest parse: {e}")))?;
    if manifest.dtype != "f32" {
        return Err(corrupt(format!("unsupported dtype {}", manifest.dtype)));
    }

    let params_len: usize = manifest
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    let masks_len: usize =
        manifest.masks.iter().map(|e| (e.numel as usize).div_ceil(8)).sum();
    let params_start = 16 + manifest_len;
    let masks_start = params_start + params_len;
    if bytes.len() != masks_start + masks_len {
        return Err(corrupt(format!(
            "expected {} bytes, found {}",
            masks_start + masks_len,
            bytes.len()
        )));
    }
    let params_region = &bytes[params_start..masks_start];
    let masks_region = &bytes[masks_start..];
    if sha256_hex(params_region) != manifest.params_region_checksum {
        return Err(corrupt("parameter region checksum mismatch".into()));
    }
    if sha256_hex(masks_region) != manifest.masks_region_checksum {
        return Err(corrupt("mask region checksum mismatch".into()));
    }

    let mut params = ParamSet::new();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > params_region.len() {
            return Err(corrupt(format!("parameter {} out of bounds", entry.name)));
        }
        let raw = &params_region[start..end];
        if sha256_hex(raw) != entry.checksum {
            return Err(corrupt(format!("checksum mismatch on parameter {}", entry.name)));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| corrupt(format!("parameter {}: {e}", entry.name)))?;
        params.insert(entry.name.clone(), tensor);
    }

    let mut masks = BTreeMap::new();
    for entry in &manifest.masks {
        let numel = entry.numel as usize;
        let start = entry.offset as usize;
        let end = start + numel.div_ceil(8);
        if end > masks_region.len() {
            return Err(corrupt(format!("mask {} out of bounds", entry.name)));
        }
        let raw = &masks_region[start..end];
        if sha256_hex(raw) != entry.checksum {
            return Err(corrupt(format!("checksum mismatch on mask {}", entry.name)));
        }
        let bits = unpack_bits(raw, numel);
        if bits.iter().filter(|&&b| b == 1).count() as u64 != entry.popcount {
            return Err(corrupt(format!("popcount mismatch on mask {}", entry.name)));
        }
        masks.insert(entry.name.clone(), bits);
    }
    Ok((params, PruneMask::from_parts(masks)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::magnitude_prune_count;
    use crate::vit::{init_params, prunable_names, tiny_config};

    fn sample() -> (ParamSet<f32>, PruneMask) {
        let config = tiny_config(3);
        let mut params = init_params::<f32>(&config, 42).unwrap();
        let mut mask = PruneMask::new(&params, &prunable_names(&config)).unwrap();
        magnitude_prune_count(&mut params, &mut mask, 100).unwrap();
        (params, mask)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (params, mask) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &params, &mask).unwrap();
        let (loaded_params, loaded_mask) = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded_params, params);
        assert_eq!(loaded_mask, mask);
        save_checkpoint(&p2, &loaded_params, &loaded_mask).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corruption_is_detected_and_names_the_file() {
        let (params, mask) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &params, &mask).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x.ckpt"), "error should name the file: {msg}");
        assert!(msg.contains("checksum") || msg.contains("corrupt"));
    }

    #[test]
    fn bit_packing_round_trip() {
        let bits: Vec<u8> = (0..37).map(|i| (i % 3 == 0) as u8).collect();
        assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
    }
}
