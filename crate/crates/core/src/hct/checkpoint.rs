//! Model checkpoints: `FSLM` magic, u16 version, u32 header length, a JSON
//! header, then every parameter as a little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hct::model::{MlpModel, ModelShape};
use crate::numerics::RngStream;

const MAGIC: &[u8; 4] = b"FSLM";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub shape: ModelShape,
    /// Fingerprint of the training configuration that produced the model.
    pub fingerprint: String,
    pub param_count: usize,
}

pub fn encode_checkpoint(model: &MlpModel, fingerprint: &str) -> Result<Vec<u8>> {
    let flat = model.params.to_flat();
    let header = serde_json::to_vec(&CheckpointHeader {
        shape: model.shape(),
        fingerprint: fingerprint.to_string(),
        param_count: flat.len(),
    })?;
    let mut out = Vec::with_capacity(10 + header.len() + flat.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn format_error(offset: usize, message: impl Into<String>) -> Error {
    Error::FormatError {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MlpModel, CheckpointHeader)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_error(0, "bad magic, expected FSLM"));
    }
    if bytes.len() < 10 {
        return Err(format_error(bytes.len(), "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_error(4, format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = 10 + hlen;
    if bytes.len() < body {
        return Err(format_error(bytes.len(), "truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[10..body]).map_err(|e| format_error(10, format!("bad header: {e}")))?;
    let expected = body + header.param_count * 8;
    if bytes.len() != expected {
        return Err(format_error(
            bytes.len().min(expected),
            format!("parameter blob has {} bytes, expected {}", bytes.len() - body, header.param_count * 8),
        ));
    }
    let flat: Vec<f64> = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = MlpModel::new(&header.shape, RngStream::new(0))?;
    if model.params.len() != header.param_count {
        return Err(format_error(10, "parameter count does not match the shape"));
    }
    model.params.set_flat(&flat)?;
    Ok((model, header))
}

pub fn save_checkpoint(model: &MlpModel, fingerprint: &str, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, fingerprint)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MlpModel, CheckpointHeader)> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MlpModel {
        let shape = ModelShape {
            input_dim: 5,
            widths: vec![7, 3],
            num_classes: 4,
            rotation_head: true,
        };
        MlpModel::new(&shape, RngStream::new(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m, "abc").unwrap();
        let (back, header) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(header.fingerprint, "abc");
        let bits = |m: &MlpModel| m.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
        assert_eq!(m.shape(), back.shape());
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint(&model(), "").unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::FormatError { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::FormatError { offset: 0, .. })));
        bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::FormatError { offset: 4, .. })));
    }
}
