//! Binary checkpoint format:
//!
//! ```text
//! "HLTX" | u32 version | u32 spec length | spec JSON | parameters as f64
//! ```
//!
//! Integers and floats are little-endian; parameters follow
//! [`HybridModel::tensors`] order.

use std::fs;
use std::path::Path;

use super::{HybridModel, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HLTX";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(m: &HybridModel) -> Result<Vec<u8>> {
    let spec = serde_json::to_vec(m.spec())?;
    let n_params = m.param_count();
    let mut out = Vec::with_capacity(12 + spec.len() + 8 * n_params);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    for t in m.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<HybridModel> {
    let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 12 {
        return Err(corrupt("file shorter than the 12-byte header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing HLTX magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let spec_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let spec_end = 12usize
        .checked_add(spec_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("spec header runs past the end of the file"))?;
    let spec: ModelSpec = serde_json::from_slice(&bytes[12..spec_end])
        .map_err(|e| Error::Checkpoint(format!("unreadable spec: {e}")))?;
    let mut model = HybridModel::zeros(spec)?;

    let payload = &bytes[spec_end..];
    let expected = model.param_count() * 8;
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes of parameters, found {}",
            payload.len()
        )));
    }
    let mut chunks = payload.chunks_exact(8);
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(m: &HybridModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; nothing is returned unless the whole file is valid.
pub fn load_checkpoint(path: &Path) -> Result<HybridModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, Variant};
    use crate::numerics::Tensor;

    fn small(variant: Variant) -> ModelSpec {
        ModelSpec {
            d_model: 8,
            lstm_hidden: 6,
            d_ff: 12,
            sequence_length: 16,
            ..ModelSpec::desk(variant)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::new(&[5, 7], (0..35).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for v in Variant::ALL {
            let m = HybridModel::build(small(v), 21).unwrap();
            let path = dir.path().join(format!("{v}.ckpt"));
            save_checkpoint(&m, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.spec().variant, v);
            assert_eq!(back, m);
            let a: Vec<u64> = m.forward(&x).unwrap().data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.forward(&x).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = HybridModel::build(small(Variant::LstmThenTransformer), 1).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        for cut in [3, 11, 40, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let m = HybridModel::build(small(Variant::TransformerThenLstm), 1).unwrap();
        let mut bytes = encode_checkpoint(&m).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { expected: 1, found: 7 }));
        assert!(err.to_string().contains("expected 1, found 7"));
    }
}
