//! Directory checkpoints: `manifest.json` plus `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::io::{crc32, read_f32_le, write_atomic, write_f32_le};
use crate::tensor::{Matrix, Scalar};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Saves parameters as little-endian f32 in storage order.
pub fn save_checkpoint<F: Scalar>(model: &Model<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut weights = Vec::with_capacity(model.num_parameters() * 4);
    let mut tensors = Vec::new();
    for (name, t) in model.params.named() {
        let bytes = write_f32_le(&t.data);
        tensors.push(TensorEntry {
            name,
            shape: vec![t.rows, t.cols],
            dtype: "f32".into(),
            offset: weights.len(),
            length: bytes.len(),
            crc32: crc32(&bytes),
        });
        weights.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors,
    };
    write_atomic(&dir.join(WEIGHTS), &weights)?;
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let manifest_path = dir.join(MANIFEST);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::load(&manifest_path, format!("corrupt manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::load(
            &manifest_path,
            format!("unknown format_version {}", manifest.format_version),
        ));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let expected = Model::<f32>::expected_shapes(&manifest.config);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::load(
            &manifest_path,
            format!(
                "config implies {} tensors, manifest lists {}",
                expected.len(),
                manifest.tensors.len()
            ),
        ));
    }

    let weights_path = dir.join(WEIGHTS);
    let weights = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let mut matrices = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name {
            return Err(Error::load(
                &manifest_path,
                format!("expected tensor {name}, found {}", entry.name),
            ));
        }
        if entry.shape != shape.to_vec() {
            return Err(Error::load(
                &manifest_path,
                format!("{name}: declared shape {:?} but config implies {shape:?}", entry.shape),
            ));
        }
        if entry.dtype != "f32" {
            return Err(Error::load(&manifest_path, format!("{name}: dtype {}", entry.dtype)));
        }
        if entry.length != shape[0] * shape[1] * 4 {
            return Err(Error::load(
                &manifest_path,
                format!("{name}: byte length {} does not match shape", entry.length),
            ));
        }
        let bytes = weights
            .get(entry.offset..entry.offset + entry.length)
            .ok_or_else(|| Error::load(&weights_path, format!("{name}: truncated weight file")))?;
        if crc32(bytes) != entry.crc32 {
            return Err(Error::load(&weights_path, format!("{name}: CRC32 mismatch")));
        }
        matrices.push(Matrix::from_vec(shape[0], shape[1], read_f32_le(bytes)));
    }

    let mut it = matrices.into_iter();
    let mut next = || it.next().expect("tensor count checked above");
    let tok_emb = next();
    let pos_emb = next();
    let blocks = (0..manifest.config.num_layers)
        .map(|_| super::BlockParams {
            ln1_gain: next(),
            ln1_bias: next(),
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            w_1: next(),
            b_1: next(),
            w_2: next(),
            b_2: next(),
        })
        .collect();
    let params = Params {
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain: next(),
        lnf_bias: next(),
        w_out: next(),
        b_out: next(),
    };
    Model::from_parts(manifest.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::TokenSeq;

    fn model() -> Model<f32> {
        Model::init(ModelConfig {
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            vocab_size: 20,
            max_seq_len: 8,
            ffn_hidden_dim: 24,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
        for probe in [vec![1u32, 2, 3], vec![19, 0, 7, 7, 7, 1]] {
            let s = TokenSeq::new(probe);
            assert_eq!(back.forward(&s).unwrap(), m.forward(&s).unwrap());
        }
    }

    #[test]
    fn truncated_weights_fail_to_load() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
    }

    #[test]
    fn flipped_byte_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS);
        let mut bytes = fs::read(&w).unwrap();
        bytes[100] ^= 1;
        fs::write(&w, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn mismatched_declared_shape_fails() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST);
        let mut manifest: Manifest = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        manifest.tensors[2].shape = vec![16, 1];
        fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn unknown_version_and_corrupt_manifest_fail() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST);
        let mut manifest: Manifest = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        manifest.format_version = 2;
        fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Load { .. })));
        fs::write(&mpath, b"{not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Load { .. })));
    }
}
