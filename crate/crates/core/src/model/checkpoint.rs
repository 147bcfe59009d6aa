//! Checkpoint container.
//!
//! Layout: the ASCII line `INCSEG-CKPT-1\n`, a little-endian `u64` header
//! length, a JSON header (architecture, label space, tensor table) and then
//! every tensor as little-endian `f32` in table order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{ArchConfig, LabelSpace, SegModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "INCSEG-CKPT-1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    arch: ArchConfig,
    label_space: LabelSpace,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &SegModel) -> Result<Vec<u8>> {
    let header = Header {
        format: CHECKPOINT_MAGIC.to_owned(),
        arch: model.arch().clone(),
        label_space: model.label_space().clone(),
        dtype: "f32-le".to_owned(),
        tensors: model
            .params()
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header.len() + 4 * model.params().num_scalars() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, tensor) in model.params().iter() {
        for v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<SegModel> {
    let magic_len = CHECKPOINT_MAGIC.len() + 1;
    if bytes.len() < magic_len + 8
        || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC.as_bytes()
        || bytes[CHECKPOINT_MAGIC.len()] != b'\n'
    {
        return Err(Error::Checkpoint(format!(
            "missing {CHECKPOINT_MAGIC} magic"
        )));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[magic_len..magic_len + 8]);
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let body_start = magic_len + 8 + header_len;
    if bytes.len() < body_start {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[magic_len + 8..body_start])?;
    if header.format != CHECKPOINT_MAGIC || header.dtype != "f32-le" {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} / dtype {}",
            header.format, header.dtype
        )));
    }
    let mut offset = body_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if bytes.len() < end {
            return Err(Error::Checkpoint(format!(
                "truncated tensor {}",
                entry.name
            )));
        }
        let values: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.push((entry.name, tensor));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    SegModel::from_parts(header.arch, header.label_space, tensors)
}

pub fn save(model: &SegModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SegModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_owned()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expand_head, HeadInit};

    #[test]
    fn roundtrip_preserves_weights_and_label_space() {
        let space = LabelSpace::new(["background", "road"], "background").unwrap();
        let m = SegModel::new(ArchConfig::tiny().with_seed(7), space);
        let m = expand_head(&m, "building", HeadInit::BackgroundCopy).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert!(bytes.starts_with(b"INCSEG-CKPT-1\n"));
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.weights_hash(), m.weights_hash());
        assert_eq!(back.label_space(), m.label_space());
        assert_eq!(back.arch(), m.arch());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        assert!(from_bytes(b"nope").is_err());
        let space = LabelSpace::new(["background", "road"], "background").unwrap();
        let m = SegModel::new(ArchConfig::tiny(), space);
        let mut bytes = to_bytes(&m).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(from_bytes(&bytes).is_err());
    }
}
