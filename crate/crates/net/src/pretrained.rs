//! Loading pre-trained ViT weights from `.safetensors` files.
//!
//! The container is an 8-byte LE header length, a JSON object mapping tensor
//! names to `{dtype, shape, data_offsets}`, then the raw little-endian data.
//! Tensor names are matched against the model's `vit.*` parameters with or
//! without the `vit.` prefix (plain `timm` exports use no prefix).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{NetError, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};
use crate::vit::PREFIX;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

fn bad(m: String) -> NetError {
    NetError::Pretrained(m)
}

fn half_to_f32(bits: u16) -> f32 {
    let sign = ((bits >> 15) as u32) << 31;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let frac = (bits & 0x3ff) as u32;
    let out = match (exp, frac) {
        (0, 0) => sign,
        (0, f) => {
            // Subnormal: value = f · 2^-24.
            let v = f as f32 * f32::powi(2.0, -24);
            return if sign != 0 { -v } else { v };
        }
        (0x1f, f) => sign | 0x7f80_0000 | (f << 13),
        (e, f) => sign | ((e + 112) << 23) | (f << 13),
    };
    f32::from_bits(out)
}

/// Decodes every tensor in a safetensors buffer, widening to `f32`.
pub fn parse_safetensors(bytes: &[u8]) -> Result<Vec<RawTensor>> {
    if bytes.len() < 8 {
        return Err(bad("file shorter than the header length field".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let rest = &bytes[8..];
    if n > rest.len() as u64 {
        return Err(bad(format!("header length {n} exceeds file")));
    }
    let (json, data) = rest.split_at(n as usize);
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    let mut out = Vec::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            continue;
        }
        let e: Entry = serde_json::from_value(value).map_err(|err| bad(format!("{name}: {err}")))?;
        let width = match e.dtype.as_str() {
            "F32" => 4,
            "F64" => 8,
            "F16" | "BF16" => 2,
            other => return Err(bad(format!("{name}: unsupported dtype {other}"))),
        };
        let [begin, end] = e.data_offsets;
        if begin > end || end > data.len() as u64 {
            return Err(bad(format!("{name}: offsets {begin}..{end} outside {} data bytes", data.len())));
        }
        let count = e
            .shape
            .iter()
            .try_fold(1u64, |a, d| a.checked_mul(*d as u64))
            .and_then(|c| c.checked_mul(width));
        if count != Some(end - begin) {
            return Err(bad(format!("{name}: shape {:?} does not match {} bytes", e.shape, end - begin)));
        }
        let buf = &data[begin as usize..end as usize];
        let values: Vec<f32> = match e.dtype.as_str() {
            "F32" => buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
            "F64" => buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")) as f32)
                .collect(),
            "F16" => buf.chunks_exact(2).map(|c| half_to_f32(u16::from_le_bytes([c[0], c[1]]))).collect(),
            _ => buf
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16))
                .collect(),
        };
        out.push(RawTensor {
            name,
            shape: e.shape,
            values,
        });
    }
    Ok(out)
}

/// Which parameters a load touched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Model parameters overwritten from the file.
    pub loaded: Vec<String>,
    /// ViT parameters the file did not provide (left at their init).
    pub missing: Vec<String>,
    /// File tensors with no matching parameter (e.g. a classifier head).
    pub unused: Vec<String>,
}

/// Copies matching ViT weights into `model`. A name match with a different
/// shape or non-finite values is an error and leaves the model unchanged.
pub fn load_vit_weights<T: Scalar>(model: &mut Model<T>, tensors: &[RawTensor]) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut updates = Vec::new();
    let mut used = vec![false; tensors.len()];
    let prefix = format!("{PREFIX}.");
    for (id, name, current) in model.params().iter() {
        let Some(bare) = name.strip_prefix(&prefix) else { continue };
        let hit = tensors.iter().position(|t| t.name == name || t.name == bare);
        match hit {
            None => report.missing.push(name.to_string()),
            Some(i) => {
                let t = &tensors[i];
                if t.shape != current.shape() {
                    return Err(bad(format!(
                        "{}: file shape {:?}, model expects {:?}",
                        t.name,
                        t.shape,
                        current.shape()
                    )));
                }
                if t.values.iter().any(|v| !v.is_finite()) {
                    return Err(bad(format!("{}: non-finite values", t.name)));
                }
                used[i] = true;
                updates.push((id, i));
                report.loaded.push(name.to_string());
            }
        }
    }
    for (id, i) in updates {
        let t = &tensors[i];
        *model.params_mut().get_mut(id) = Tensor::new(&t.shape, t.values.iter().map(|v| T::lit(*v as f64)).collect());
    }
    report.unused = tensors
        .iter()
        .zip(used)
        .filter(|(_, u)| !u)
        .map(|(t, _)| t.name.clone())
        .collect();
    Ok(report)
}

pub fn load_vit_safetensors<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<LoadReport> {
    let bytes = std::fs::read(path).map_err(|e| NetError::io(path, e))?;
    let tensors = parse_safetensors(&bytes)?;
    load_vit_weights(model, &tensors)
}

/// Serializes `f32` tensors as a safetensors buffer.
pub fn encode_safetensors(tensors: &[RawTensor]) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for t in tensors {
        let len = 4 * t.values.len() as u64;
        header.insert(
            t.name.clone(),
            serde_json::json!({"dtype": "F32", "shape": t.shape, "data_offsets": [offset, offset + len]}),
        );
        offset += len;
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = (json.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&json);
    for t in tensors {
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
