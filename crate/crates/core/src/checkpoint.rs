//! `NEARL1` checkpoints: every named tensor of a model, bit-exact.
//!
//! Layout (little-endian): `b"NEARL1"`, `u32` record count, then per record
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and the
//! `f64` payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::NearlModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"NEARL1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::Truncated { what: format!("checkpoint {what}"), offset: pos, needed: n });
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::BadHeader { what: "checkpoint".into(), detail: "magic is not NEARL1".into() });
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = u32_at(take(4, "record count")?);
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = u32_at(take(4, "name length")?);
        let name = String::from_utf8(take(len, "name")?.to_vec())
            .map_err(|_| Error::BadHeader { what: "checkpoint".into(), detail: format!("record {i} name is not UTF-8") })?;
        let rank = u32_at(take(4, "rank")?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8, "dims")?.try_into().unwrap()) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::BadHeader {
            what: "checkpoint".into(),
            detail: format!("record {name} has overflowing dims"),
        })?;
        let payload = take(numel.saturating_mul(8), "payload")?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        records.push(Record { name, shape, data });
    }
    if pos != bytes.len() {
        return Err(Error::BadHeader { what: "checkpoint".into(), detail: format!("{} trailing bytes", bytes.len() - pos) });
    }
    Ok(records)
}

pub fn records_of(model: &NearlModel) -> Vec<Record> {
    model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| Record { name, shape: t.shape().to_vec(), data: t.to_vec() })
        .collect()
}

/// Replaces every tensor of `model` with the stored value. The record set
/// must match the model's tensor names and shapes exactly.
pub fn restore(model: &mut NearlModel, records: Vec<Record>) -> Result<()> {
    let mut by_name: BTreeMap<String, Record> = BTreeMap::new();
    for r in records {
        let name = r.name.clone();
        if by_name.insert(name.clone(), r).is_some() {
            return Err(Error::BadHeader { what: "checkpoint".into(), detail: format!("duplicate record {name}") });
        }
    }
    for (name, slot) in model.named_tensors_mut() {
        let r = by_name.remove(&name).ok_or_else(|| {
            Error::DimMismatch(format!("checkpoint has no record {name} (was it saved in another mode?)"))
        })?;
        if r.shape != slot.shape() {
            return Err(Error::DimMismatch(format!("record {name} has shape {:?}, model expects {:?}", r.shape, slot.shape())));
        }
        let trainable = slot.requires_grad();
        *slot = Tensor::new(r.data, &r.shape)?.with_requires_grad(trainable);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::DimMismatch(format!("checkpoint record {extra} does not belong to this model")));
    }
    Ok(())
}

pub fn save(model: &NearlModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&records_of(model))).map_err(|e| Error::io(path, e))
}

pub fn load_into(model: &mut NearlModel, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(model, decode(&bytes)?)
}
