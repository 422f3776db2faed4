//! Binary checkpoint container for model weights and sparsity masks.
//!
//! The layout is frozen — readers and writers in other languages must be
//! able to interoperate byte-for-byte:
//!
//! ```text
//! magic   4 bytes  "DNTH"
//! version u16 LE   (currently 1)
//! count   u32 LE   number of records
//! record:
//!   name length  u32 LE
//!   name         UTF-8 bytes
//!   dtype        u8   0 = f64 tensor, 1 = bit-packed mask, 2 = UTF-8 text
//!   rank         u8
//!   dims         rank × u64 LE
//!   payload      dtype 0: product(dims) × 8 bytes, f64 LE
//!                dtype 1: ceil(product(dims)/8) bytes, LSB-first bits
//!                dtype 2: product(dims) bytes (rank is 1)
//! ```
//!
//! A container holds one `__meta` text record (JSON: model variant,
//! config, and the mask target sparsity when masks are present), then
//! every parameter tensor in model order, then one `<param>.mask` record
//! per masked tensor. Record order is what the writer emitted, so a
//! load→save round trip reproduces the input bytes exactly.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{Model, ModelConfig, Variant};
use crate::prune::MaskSet;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DNTH";
pub const VERSION: u16 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_MASK: u8 = 1;
const DTYPE_TEXT: u8 = 2;
const META_NAME: &str = "__meta";

#[derive(Serialize, Deserialize)]
struct Meta {
    variant: Variant,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_sparsity: Option<f64>,
}

fn push_record(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize], payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(payload);
}

fn pack_bits(mask: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

/// Serialize a model (and optionally its mask set) to container bytes.
pub fn to_bytes(model: &Model, masks: Option<&MaskSet>) -> Result<Vec<u8>> {
    if let Some(m) = masks {
        m.validate_against(model)?;
    }
    let meta = Meta {
        variant: model.variant,
        config: model.config.clone(),
        target_sparsity: masks.map(|m| m.target_sparsity),
    };
    let meta_json = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;

    let n_masks = masks.map(|m| m.masks.len()).unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&((1 + model.params.len() + n_masks) as u32).to_le_bytes());

    push_record(&mut out, META_NAME, DTYPE_TEXT, &[meta_json.len()], meta_json.as_bytes());
    for (name, t) in &model.params {
        let mut payload = Vec::with_capacity(t.data.len() * 8);
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        push_record(&mut out, name, DTYPE_F64, &t.shape, &payload);
    }
    if let Some(m) = masks {
        for (name, mask) in &m.masks {
            let dims = &model.params[name].shape;
            push_record(&mut out, &format!("{name}.mask"), DTYPE_MASK, dims, &pack_bits(mask));
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, masks: Option<&MaskSet>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model, masks)?)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (need {n} more)", self.pos))
        })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct RawRecord<'a> {
    name: String,
    dtype: u8,
    dims: Vec<usize>,
    payload: &'a [u8],
}

fn read_record<'a>(cur: &mut Cursor<'a>) -> Result<RawRecord<'a>> {
    let name_len = cur.u32()? as usize;
    let name = std::str::from_utf8(cur.take(name_len)?)
        .map_err(|_| Error::Format("record name is not valid UTF-8".to_string()))?
        .to_string();
    let dtype = cur.u8()?;
    let rank = cur.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = cur.u64()? as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format(format!("record {name:?} has overflowing dims")))?;
        dims.push(d);
    }
    let payload_len = match dtype {
        DTYPE_F64 => count * 8,
        DTYPE_MASK => count.div_ceil(8),
        DTYPE_TEXT => count,
        other => return Err(Error::Format(format!("record {name:?} has unknown dtype {other}"))),
    };
    Ok(RawRecord { name, dtype, dims, payload: cur.take(payload_len)? })
}

/// Deserialize container bytes back into a model and its mask set (when
/// one was stored).
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Option<MaskSet>)> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic: not a checkpoint container".to_string()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (reader supports {VERSION})"
        )));
    }
    let count = cur.u32()? as usize;

    let mut meta: Option<Meta> = None;
    let mut params: IndexMap<String, Tensor> = IndexMap::new();
    let mut masks: IndexMap<String, Vec<bool>> = IndexMap::new();
    for _ in 0..count {
        let rec = read_record(&mut cur)?;
        match rec.dtype {
            DTYPE_TEXT if rec.name == META_NAME => {
                let text = std::str::from_utf8(rec.payload)
                    .map_err(|_| Error::Format("metadata is not valid UTF-8".to_string()))?;
                meta = Some(
                    serde_json::from_str(text)
                        .map_err(|e| Error::Format(format!("metadata: {e}")))?,
                );
            }
            DTYPE_F64 => {
                let data: Vec<f64> = rec
                    .payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let tensor = Tensor::new(rec.dims, data, false)?;
                if params.insert(rec.name.clone(), tensor).is_some() {
                    return Err(Error::Format(format!("duplicate tensor record {:?}", rec.name)));
                }
            }
            DTYPE_MASK => {
                let param_name = rec.name.strip_suffix(".mask").ok_or_else(|| {
                    Error::Format(format!("mask record {:?} lacks the .mask suffix", rec.name))
                })?;
                let n: usize = rec.dims.iter().product();
                let bits: Vec<bool> =
                    (0..n).map(|i| rec.payload[i / 8] & (1 << (i % 8)) != 0).collect();
                if masks.insert(param_name.to_string(), bits).is_some() {
                    return Err(Error::Format(format!("duplicate mask record {:?}", rec.name)));
                }
            }
            _ => {
                return Err(Error::Format(format!(
                    "unexpected text record {:?} (only {META_NAME:?} is recognized)",
                    rec.name
                )))
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - cur.pos
        )));
    }
    let meta = meta.ok_or_else(|| Error::Format("container has no metadata record".to_string()))?;
    let model = Model::from_params(meta.config, meta.variant, params)?;
    let mask_set = if masks.is_empty() {
        None
    } else {
        let target_sparsity = meta.target_sparsity.ok_or_else(|| {
            Error::Format("container has masks but no target sparsity in metadata".to_string())
        })?;
        let set = MaskSet { target_sparsity, masks };
        set.validate_against(&model)?;
        Some(set)
    };
    Ok((model, mask_set))
}

pub fn load(path: &Path) -> Result<(Model, Option<MaskSet>)> {
    from_bytes(&fs::read(path)?)
}
