//! Binary checkpoints: a magic line, a little-endian `u64` header length, a
//! JSON header describing the model and its tensors, then the raw
//! little-endian `f64` payloads in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};
use crate::network::{ArchitectureSpec, Model};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 8] = b"GTNCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapHeader {
    pub kind: FeatureKind,
    pub out_dim: usize,
    pub bins: usize,
    /// Number of table tensors stored after the network parameters.
    pub tables: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Payload size in bytes.
    pub payload_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub architecture: ArchitectureSpec,
    pub feature_map: FeatureMapHeader,
    pub positive: bool,
    pub tensors: Vec<TensorEntry>,
}

fn entries(model: &Model) -> Vec<(String, &DenseTensor)> {
    let mut out: Vec<(String, &DenseTensor)> = model
        .param_names()
        .iter()
        .cloned()
        .zip(model.params())
        .collect();
    if model.feature_map().is_learnable() {
        for (i, t) in model.feature_map().tables().iter().enumerate() {
            out.push((format!("features.table{i}"), t));
        }
    }
    out
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let fm = model.feature_map();
    let tensors = entries(model);
    let header = Header {
        format_version: FORMAT_VERSION,
        architecture: model.spec().clone(),
        feature_map: FeatureMapHeader {
            kind: fm.kind(),
            out_dim: fm.out_dim(),
            bins: fm.bins(),
            tables: if fm.is_learnable() { fm.tables().len() } else { 0 },
        },
        positive: model.is_positive(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                payload_len: 8 * t.len() as u64,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| 8 * t.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::parse("byte 0", "not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::parse("byte 8", format!("header length {header_len} exceeds the file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])
        .map_err(|e| Error::parse("byte 16", format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            "byte 16",
            format!("format version {} (expected {FORMAT_VERSION})", header.format_version),
        ));
    }
    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        if entry.payload_len != 8 * len as u64 {
            return Err(Error::parse(
                format!("byte {offset}"),
                format!("{} declares {} payload bytes for shape {:?}", entry.name, entry.payload_len, entry.shape),
            ));
        }
        let end = offset + 8 * len;
        if end > bytes.len() {
            return Err(Error::parse(format!("byte {offset}"), format!("{} payload is truncated", entry.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name.clone(), DenseTensor::new(entry.shape.clone(), data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::parse(format!("byte {offset}"), "trailing bytes after the last payload"));
    }
    let fmh = &header.feature_map;
    let n_tables = fmh.tables;
    if n_tables > tensors.len() {
        return Err(Error::parse("byte 16", "more feature tables than tensors"));
    }
    let tables: Vec<DenseTensor> = tensors.split_off(tensors.len() - n_tables).into_iter().map(|(_, t)| t).collect();
    let feature_map = if fmh.kind == FeatureKind::LearnableTable {
        FeatureMap::from_tables(tables)?
    } else {
        FeatureMap::fixed(fmh.kind, fmh.out_dim)?
    };
    Model::from_parts(header.architecture, tensors, feature_map, header.positive)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
