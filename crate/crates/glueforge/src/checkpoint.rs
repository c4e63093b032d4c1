//! Checkpoint persistence and the structural compatibility check that
//! gates merging.
//!
//! A checkpoint directory holds two files:
//!
//! * `model.safetensors` — 8-byte little-endian header length, UTF-8 JSON
//!   header mapping tensor name to `{dtype, shape, data_offsets}`, then the
//!   contiguous little-endian f32 payload (safetensors-compatible layout).
//! * `manifest.json` — the [`ArchDescriptor`] sidecar.
//!
//! Writes are byte-deterministic for identical inputs: tensor ordering is
//! lexicographic and the header JSON has a fixed field order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchDescriptor;
use crate::error::{GlueError, Result};
use crate::store::{Tensor, TensorStore};

pub const TENSOR_FILE: &str = "model.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Structural verdict for a pair of models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatVerdict {
    /// Identical tensor sets and shapes: weight-space merging is possible.
    Mergeable,
    /// Same embedding width and vocabulary but different internals: only a
    /// model-level mixture can combine them.
    MixtureOnly,
    Incompatible,
}

/// Outcome of [`check_compat`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompatReport {
    pub same_arch: bool,
    pub shape_mismatches: Vec<String>,
    pub verdict: CompatVerdict,
}

/// Persists `store` + `desc` under `path`, creating the directory.
///
/// The store must conform to the descriptor (every tensor has a role and
/// every role names a tensor). Saving identical inputs twice produces
/// byte-identical files.
pub fn save_checkpoint(store: &TensorStore, desc: &ArchDescriptor, path: &Path) -> Result<()> {
    desc.validate()?;
    desc.check_conformance(store)?;

    fs::create_dir_all(path).map_err(|e| GlueError::io(path, e))?;

    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, tensor) in store.iter() {
        let nbytes = tensor.len() * 4;
        header.insert(
            name.clone(),
            HeaderEntry {
                dtype: "F32".to_string(),
                shape: tensor.shape().to_vec(),
                data_offsets: [offset, offset + nbytes],
            },
        );
        offset += nbytes;
    }
    let header_json = serde_json::to_vec(&header)?;

    let tensor_path = path.join(TENSOR_FILE);
    let mut buf = Vec::with_capacity(8 + header_json.len() + offset);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, tensor) in store.iter() {
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&tensor_path, &buf)?;

    let manifest = serde_json::to_vec_pretty(desc)?;
    write_atomic(&path.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| GlueError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| GlueError::io(&tmp, e))?;
        f.flush().map_err(|e| GlueError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| GlueError::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(TensorStore, ArchDescriptor)> {
    let manifest_path = path.join(MANIFEST_FILE);
    let manifest_bytes =
        fs::read(&manifest_path).map_err(|e| GlueError::io(&manifest_path, e))?;
    let desc: ArchDescriptor = serde_json::from_slice(&manifest_bytes)?;
    desc.validate()?;

    let tensor_path = path.join(TENSOR_FILE);
    let mut file = fs::File::open(&tensor_path).map_err(|e| GlueError::io(&tensor_path, e))?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| GlueError::Format("tensor file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;

    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| GlueError::Format("truncated tensor file header".into()))?;
    let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&header_bytes)
        .map_err(|e| GlueError::Format(format!("malformed header: {e}")))?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| GlueError::io(&tensor_path, e))?;

    let mut store = TensorStore::new();
    for (name, entry) in &header {
        if entry.dtype != "F32" {
            return Err(GlueError::Format(format!(
                "tensor {name}: unsupported dtype {}",
                entry.dtype
            )));
        }
        let [start, end] = entry.data_offsets;
        if end < start || end > payload.len() {
            return Err(GlueError::Format(format!(
                "tensor {name}: offsets [{start}, {end}) outside payload of {} bytes",
                payload.len()
            )));
        }
        let count: usize = entry.shape.iter().product();
        if end - start != count * 4 {
            return Err(GlueError::Format(format!(
                "tensor {name}: shape {:?} does not match {} payload bytes",
                entry.shape,
                end - start
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }

    desc.check_conformance(&store)?;
    Ok((store, desc))
}

/// Structural half of the mergeability check; the similarity half lives in
/// [`crate::similarity`]. Total and symmetric.
pub fn check_compat(
    a_desc: &ArchDescriptor,
    a_store: &TensorStore,
    b_desc: &ArchDescriptor,
    b_store: &TensorStore,
) -> CompatReport {
    let same_names = a_store.len() == b_store.len()
        && a_store.names().all(|n| b_store.contains(n));
    let same_arch = same_names && a_desc.same_dims(b_desc);

    let mut shape_mismatches = Vec::new();
    for (name, t) in a_store.iter() {
        if let Some(o) = b_store.get(name) {
            if o.shape() != t.shape() {
                shape_mismatches.push(name.clone());
            }
        }
    }

    let verdict = if same_arch && shape_mismatches.is_empty() {
        CompatVerdict::Mergeable
    } else if a_desc.hidden_dim == b_desc.hidden_dim && a_desc.vocab_size == b_desc.vocab_size {
        CompatVerdict::MixtureOnly
    } else {
        CompatVerdict::Incompatible
    };

    CompatReport {
        same_arch,
        shape_mismatches,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{build_toy_model, ToyConfig};

    fn toy() -> (TensorStore, ArchDescriptor) {
        build_toy_model(&ToyConfig::small_test(), 7).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let (store, desc) = toy();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&store, &desc, dir.path()).unwrap();
        let (loaded, loaded_desc) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded_desc, desc);
        assert_eq!(loaded.len(), store.len());
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            assert_eq!(l.data(), t.data(), "tensor {name} changed across round trip");
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let (store, desc) = toy();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_checkpoint(&store, &desc, d1.path()).unwrap();
        save_checkpoint(&store, &desc, d2.path()).unwrap();
        for file in [TENSOR_FILE, MANIFEST_FILE] {
            let a = fs::read(d1.path().join(file)).unwrap();
            let b = fs::read(d2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical saves");
        }
    }

    #[test]
    fn save_rejects_tensor_without_role() {
        let (mut store, desc) = toy();
        store
            .insert("stray.weight", Tensor::new(vec![1], vec![0.5]).unwrap())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_checkpoint(&store, &desc, dir.path()).is_err());
    }

    #[test]
    fn load_detects_manifest_tensor_mismatch() {
        // Manifest declares more layers of tensors than the store holds.
        let (store, desc) = toy();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&store, &desc, dir.path()).unwrap();

        let mut bigger = desc.clone();
        bigger.num_layers = 4;
        bigger.tensor_roles.insert(
            "model.layers.3.mlp.gate_proj.weight".into(),
            crate::arch::TensorRole::Ffn(3),
        );
        let manifest = serde_json::to_vec_pretty(&bigger).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();

        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest/tensor mismatch"), "{err}");
    }

    #[test]
    fn load_detects_malformed_header() {
        let (store, desc) = toy();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&store, &desc, dir.path()).unwrap();

        let path = dir.path().join(TENSOR_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[9] = b'!'; // corrupt the JSON header
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn load_detects_shape_payload_mismatch() {
        let (store, desc) = toy();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&store, &desc, dir.path()).unwrap();

        let path = dir.path().join(TENSOR_FILE);
        let bytes = fs::read(&path).unwrap();
        // Truncate the payload; offsets in the header now point past the end.
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn compat_same_descriptor_is_mergeable() {
        let (a, da) = toy();
        let (b, db) = build_toy_model(&ToyConfig::small_test(), 8).unwrap();
        let report = check_compat(&da, &a, &db, &b);
        assert_eq!(report.verdict, CompatVerdict::Mergeable);
        assert!(report.same_arch);
    }

    #[test]
    fn compat_differing_ffn_is_mixture_only() {
        let (a, da) = toy();
        let mut cfg = ToyConfig::small_test();
        cfg.ffn_dim *= 2;
        let (b, db) = build_toy_model(&cfg, 7).unwrap();
        let report = check_compat(&da, &a, &db, &b);
        assert_eq!(report.verdict, CompatVerdict::MixtureOnly);
        assert!(!report.shape_mismatches.is_empty());
        // Symmetry.
        let rev = check_compat(&db, &b, &da, &a);
        assert_eq!(rev.verdict, report.verdict);
    }

    #[test]
    fn compat_differing_vocab_is_incompatible() {
        let (a, da) = toy();
        let mut cfg = ToyConfig::small_test();
        cfg.vocab_size *= 2;
        let (b, db) = build_toy_model(&cfg, 7).unwrap();
        assert_eq!(
            check_compat(&da, &a, &db, &b).verdict,
            CompatVerdict::Incompatible
        );
    }

    #[test]
    fn compat_self_is_mergeable() {
        let (a, da) = toy();
        assert_eq!(check_compat(&da, &a, &da, &a).verdict, CompatVerdict::Mergeable);
    }
}
