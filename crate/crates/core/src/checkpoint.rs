//! Checkpoint container: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then raw little-endian tensor payloads.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::params::{Adam, AdamConfig, FreezeUnit, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WSSSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Value,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub slot: Slot,
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub offset: u64,
    pub bytes: u64,
    pub sha256: String,
    pub trainable: bool,
    pub unit: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u32,
    /// Free-form run metadata (model config, epoch, step).
    pub meta: serde_json::Value,
    pub optimizer: Option<OptimizerState>,
    pub tensors: Vec<TensorRecord>,
}

/// A parsed checkpoint held in memory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub values: BTreeMap<(String, Slot), Tensor>,
}

/// Outcome of applying a checkpoint to a freshly built store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Parameters left at their fresh initialization (partial loads only).
    pub fresh: Vec<String>,
}

impl LoadReport {
    pub fn has_fresh(&self) -> bool {
        !self.fresh.is_empty()
    }
}

fn ckpt_err(tensor: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: tensor.to_string(),
        reason: reason.into(),
    }
}

fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F64 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F32 => t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes the store (and optimizer moments, if given) to bytes.
pub fn to_bytes(store: &ParamStore, adam: Option<&Adam>, meta: serde_json::Value, dtype: Dtype) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, slot: Slot, t: &Tensor, trainable: bool, unit: Option<FreezeUnit>| {
        let bytes = encode(t, dtype);
        tensors.push(TensorRecord {
            name: name.to_string(),
            slot,
            rows: t.rows(),
            cols: t.cols(),
            dtype,
            offset: payload.len() as u64,
            bytes: bytes.len() as u64,
            sha256: hex(&Sha256::digest(&bytes)),
            trainable,
            unit: unit.map(FreezeUnit::label),
        });
        payload.extend_from_slice(&bytes);
    };
    for (id, p) in store.iter() {
        push(&p.name, Slot::Value, &p.value, p.trainable, p.unit);
        if let Some(adam) = adam {
            let (m, v) = adam.moments(id);
            if let (Some(m), Some(v)) = (m, v) {
                push(&p.name, Slot::AdamM, m, p.trainable, p.unit);
                push(&p.name, Slot::AdamV, v, p.trainable, p.unit);
            }
        }
    }
    let header = Header {
        format: FORMAT_VERSION,
        meta,
        optimizer: adam.map(|a| OptimizerState {
            config: a.config.clone(),
            step: a.step,
        }),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ckpt_err("<header>", e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore, adam: Option<&Adam>, meta: serde_json::Value, dtype: Dtype) -> Result<()> {
    write_atomic(path, &to_bytes(store, adam, meta, dtype)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("<header>", "missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ckpt_err("<header>", "header length exceeds file size"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| ckpt_err("<header>", e.to_string()))?;
    if header.format != FORMAT_VERSION {
        return Err(ckpt_err("<header>", format!("unsupported format version {}", header.format)));
    }
    let payload = &bytes[body..];
    let mut values = BTreeMap::new();
    for rec in &header.tensors {
        let start = rec.offset as usize;
        let end = start
            .checked_add(rec.bytes as usize)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| ckpt_err(&rec.name, "payload truncated"))?;
        if rec.bytes as usize != rec.rows * rec.cols * rec.dtype.width() {
            return Err(ckpt_err(&rec.name, "payload size does not match its shape"));
        }
        let chunk = &payload[start..end];
        if hex(&Sha256::digest(chunk)) != rec.sha256 {
            return Err(ckpt_err(&rec.name, "payload checksum mismatch"));
        }
        let t = Tensor::from_vec(rec.rows, rec.cols, decode(chunk, rec.dtype))?;
        values.insert((rec.name.clone(), rec.slot), t);
    }
    Ok(Checkpoint { header, values })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of a checkpoint file, used as its identifier.
pub fn file_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(&(name.to_string(), Slot::Value))
    }

    fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.header
            .tensors
            .iter()
            .find(|r| r.name == name && r.slot == Slot::Value)
    }

    /// Copies stored values and flags into `store`. With `only_prefixes`, only
    /// matching parameters are required and loaded; the rest stay fresh.
    pub fn apply(&self, store: &mut ParamStore, adam: Option<&mut Adam>, only_prefixes: Option<&[&str]>) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let wanted = |name: &str| only_prefixes.is_none_or(|ps| ps.iter().any(|p| name.starts_with(p)));
        let ids: Vec<_> = store.ids().collect();
        let mut pending = Vec::new();
        for &id in &ids {
            let name = store.get(id).name.clone();
            if !wanted(&name) {
                report.fresh.push(name);
                continue;
            }
            let stored = self
                .get(&name)
                .ok_or_else(|| ckpt_err(&name, "missing from checkpoint"))?;
            let expect = store.value(id).shape();
            if stored.shape() != expect {
                return Err(Error::Dimension(format!(
                    "checkpoint tensor {name} is {:?}, model expects {:?}",
                    stored.shape(),
                    expect
                )));
            }
            pending.push((id, name));
        }
        if only_prefixes.is_none() {
            let known: std::collections::HashSet<&str> = ids.iter().map(|&i| store.get(i).name.as_str()).collect();
            if let Some(extra) = self.header.tensors.iter().find(|r| !known.contains(r.name.as_str())) {
                return Err(Error::Dimension(format!(
                    "checkpoint tensor {} has no counterpart in the model",
                    extra.name
                )));
            }
        }
        let mut adam = adam;
        if let (Some(a), Some(state)) = (adam.as_deref_mut(), &self.header.optimizer) {
            a.config = state.config.clone();
            a.step = state.step;
        }
        for (id, name) in pending {
            *store.value_mut(id) = self.get(&name).unwrap().clone();
            if let Some(rec) = self.record(&name) {
                store.set_trainable(id, rec.trainable);
            }
            if let Some(a) = adam.as_deref_mut() {
                a.m[id.index()] = self.values.get(&(name.clone(), Slot::AdamM)).cloned();
                a.v[id.index()] = self.values.get(&(name.clone(), Slot::AdamV)).cloned();
            }
            report.loaded.push(name);
        }
        Ok(report)
    }
}
