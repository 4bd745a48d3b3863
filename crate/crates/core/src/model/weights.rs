//! Weights file: `YWTS`, u32 version, u64 header length, JSON header
//! `{name: {shape, dtype, offset, nbytes}}`, then raw little-endian f32 data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, Result};
use crate::blocks::Params;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"YWTS";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

/// Serializes every stored tensor, running statistics included.
pub fn save_weights(model: &Model) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut data = Vec::new();
    model.visit_params("", &mut |name, p| {
        let offset = data.len() as u64;
        for v in p.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.to_string(),
            Entry {
                shape: p.shape,
                dtype: "f32".into(),
                offset,
                nbytes: data.len() as u64 - offset,
            },
        );
    });
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(ModelError::UnexpectedEof);
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Replaces every tensor of `model` with the file's. Names and shapes must
/// match exactly; nothing is modified on error.
pub fn load_weights(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let mut rest = bytes;
    if take(&mut rest, 4)? != WEIGHTS_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut rest, 4)?.try_into().expect("4 bytes"));
    if version != WEIGHTS_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| ModelError::UnexpectedEof)?;
    let header: BTreeMap<String, Entry> =
        serde_json::from_slice(take(&mut rest, header_len)?).map_err(|e| ModelError::BadHeader(e.to_string()))?;
    let data = rest;

    // Validate everything before touching the model.
    let mut expected = Vec::new();
    model.visit_params("", &mut |name, p| expected.push((name.to_string(), p.shape)));
    let mut slices = BTreeMap::new();
    for (name, shape) in &expected {
        let entry = header
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        if &entry.shape != shape {
            return Err(ModelError::WeightShape {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(ModelError::BadHeader(format!(
                "{name}: unsupported dtype {:?}",
                entry.dtype
            )));
        }
        let len: usize = shape.iter().product();
        if entry.nbytes != 4 * len as u64 {
            return Err(ModelError::BadHeader(format!(
                "{name}: nbytes {} does not match shape {shape:?}",
                entry.nbytes
            )));
        }
        let start = usize::try_from(entry.offset).map_err(|_| ModelError::UnexpectedEof)?;
        let end = start.checked_add(4 * len).ok_or(ModelError::UnexpectedEof)?;
        let raw = data.get(start..end).ok_or(ModelError::UnexpectedEof)?;
        slices.insert(name.as_str(), raw);
    }
    if let Some(extra) = header.keys().find(|k| !slices.contains_key(k.as_str())) {
        return Err(ModelError::UnexpectedTensor(extra.clone()));
    }

    model.visit_params_mut("", &mut |name, p| {
        let raw = slices[name];
        for (v, b) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    });
    Ok(())
}
