//! Checkpoint files.
//!
//! Layout: magic `FLCK`, `u32` LE format version, `u64` LE header length,
//! a JSON header `{config, step, seed, tensors: [{name, shape}]}`, then every
//! tensor's values as `f32` LE in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::model::{Model, NetworkConfig};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FLCK";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: NetworkConfig,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, meta: CheckpointMeta) -> Vec<u8> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        step: meta.step,
        seed: meta.seed,
        tensors: model
            .params()
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n = model.params().num_scalars();
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model<f32>, CheckpointMeta)> {
    let bad = |m: String| NetError::Checkpoint(m);
    if bytes.len() < PREFIX_LEN {
        return Err(bad(format!("{} bytes is shorter than the prefix", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing FLCK magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREFIX_LEN..];
    if header_len > rest.len() as u64 {
        return Err(bad(format!("header length {header_len} exceeds file")));
    }
    let (json, data) = rest.split_at(header_len as usize);
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    header.config.validate()?;
    let mut total: usize = 0;
    for e in &header.tensors {
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| bad(format!("tensor {} size overflows", e.name)))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| bad("total size overflows".into()))?;
    }
    if total.checked_mul(4) != Some(data.len()) {
        return Err(bad(format!(
            "header describes {total} values, payload has {} bytes",
            data.len()
        )));
    }
    // Refuse before allocating a model whose layout the payload cannot fill.
    let expected = expected_num_scalars(&header.config)
        .ok_or_else(|| bad("configuration size overflows".into()))?;
    if expected != total {
        return Err(bad(format!(
            "configuration implies {expected} values, checkpoint holds {total}"
        )));
    }
    let mut store = ParamStore::<f32>::default();
    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for e in &header.tensors {
        let n = e.shape.iter().product();
        let values: Vec<f32> = floats.by_ref().take(n).collect();
        if store.find(&e.name).is_some() {
            return Err(bad(format!("duplicate tensor {}", e.name)));
        }
        store.add(e.name.clone(), Tensor::new(&e.shape, values));
    }
    if !store.all_finite() {
        return Err(bad("non-finite parameter values".into()));
    }
    let model = Model::from_params(header.config, store)?;
    Ok((
        model,
        CheckpointMeta {
            step: header.step,
            seed: header.seed,
        },
    ))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, meta: CheckpointMeta) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, meta)).map_err(|e| NetError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| NetError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Parameter count implied by a configuration, computed without
/// allocating; `None` on arithmetic overflow.
pub fn expected_num_scalars(c: &NetworkConfig) -> Option<usize> {
    use crate::model::AblationMode::*;
    let add = |a: usize, b: usize| a.checked_add(b);
    let mul = |a: usize, b: usize| a.checked_mul(b);
    let conv = |cin: usize, cout: usize, k: usize| add(mul(mul(mul(cin, cout)?, k)?, k)?, cout);
    let linear = |i: usize, o: usize| add(mul(i, o)?, o);
    let mut n = match c.ablation_mode {
        Fusion => add(conv(3, 2, 3)?, conv(1, 1, 3)?)?,
        RgbResize | LocalOnly => 0,
        RgbResizeConv => conv(3, 3, 3)?,
        RgbdResizeConv => conv(4, 3, 3)?,
    };
    if c.ablation_mode != LocalOnly {
        let d = c.vit_embed_dim;
        let grid = c.vit_input / c.vit_patch.max(1);
        let tokens = add(mul(grid, grid)?, 1)?;
        let hidden = mul(d, c.vit_mlp_ratio)?;
        let block = [
            mul(2, d)?,
            linear(d, mul(3, d)?)?,
            linear(d, d)?,
            mul(2, d)?,
            linear(d, hidden)?,
            linear(hidden, d)?,
        ]
        .into_iter()
        .try_fold(0usize, add)?;
        n = add(n, conv(3, d, c.vit_patch)?)?;
        n = add(n, d)?;
        n = add(n, mul(tokens, d)?)?;
        n = add(n, mul(block, c.vit_depth)?)?;
        n = add(n, mul(2, d)?)?;
    }
    for cin in [3usize, 1] {
        let mut ch = cin;
        for &o in &c.cnn_channels {
            n = add(n, conv(ch, o, 3)?)?;
            ch = o;
        }
    }
    let l = c.local_channels;
    let c4 = *c.cnn_channels.last()?;
    let corr = mul(add(mul(2, c.corr_max_disp)?, 1)?, add(mul(2, c.corr_max_disp)?, 1)?)?;
    n = add(n, conv(corr, l, 3)?)?;
    n = add(n, conv(l, l, 3)?)?;
    n = add(n, conv(c4, l, 3)?)?;
    n = add(n, conv(l, l, 3)?)?;
    for out in [3usize, 4] {
        let mut i = add(l, c.vit_embed_dim)?;
        for &h in &c.mlp_hidden {
            n = add(n, linear(i, h)?)?;
            i = h;
        }
        n = add(n, linear(i, out)?)?;
    }
    Some(n)
}
