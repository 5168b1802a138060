//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//! `b"STEP1"`, `u32` header length, JSON header, `u32` record count, then per record
//! `u32` name length, UTF-8 name, `u32` rank, `u64` extents, `f64` values.
//! Parameters use their own names; Adam moments are stored as `opt.m.<name>` and
//! `opt.v.<name>`. Values round-trip bit-exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use step_core::network::{ModelConfig, StepModel};
use step_core::train::AdamState;
use step_core::{ParamStore, Tensor};

use crate::config::CONFIG_VERSION;
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"STEP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config_version: u32,
    pub model: ModelConfig,
    /// Last completed epoch (1-based); 0 before training.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(header: CheckpointHeader, store: &ParamStore, opt: &AdamState) -> Self {
        let mut records: Vec<(String, Tensor)> = store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (p, m) in store.iter().zip(&opt.m) {
            records.push((format!("opt.m.{}", p.name), m.clone()));
        }
        for (p, v) in store.iter().zip(&opt.v) {
            records.push((format!("opt.v.{}", p.name), v.clone()));
        }
        Checkpoint { header, records }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        // write-then-rename so a crash never leaves a truncated checkpoint behind
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::parse(path, format!("not a checkpoint: {m}"));
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(MAGIC.len()).ok_or_else(|| bad("truncated"))? != MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        let hlen = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen).ok_or_else(|| bad("truncated header"))?)
            .map_err(|e| bad(&e.to_string()))?;
        let n = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated record"))?)
                .map_err(|_| bad("record name is not UTF-8"))?
                .to_string();
            let rank = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| bad("truncated record"))? as usize);
            }
            let count =
                shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extents overflow"))?;
            let raw = r
                .take(count.checked_mul(8).ok_or_else(|| bad("extents overflow"))?)
                .ok_or_else(|| bad("truncated values"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            records.push((name, Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))?));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { header, records })
    }

    /// Rebuilds the model, parameters and optimizer state. The checkpoint must have been
    /// written for exactly `model` (same configuration, same parameter names and shapes).
    pub fn restore(&self, model: &ModelConfig) -> Result<(StepModel, ParamStore, AdamState)> {
        if self.header.config_version != CONFIG_VERSION {
            return Err(Error::Mismatch(format!(
                "config_version {} (expected {CONFIG_VERSION})",
                self.header.config_version
            )));
        }
        if &self.header.model != model {
            return Err(Error::Mismatch(format!(
                "model configuration differs: {}",
                model_diff(&self.header.model, model)
            )));
        }
        let (net, mut store) = StepModel::new(model, self.header.seed).map_err(|m| Error::Usage(m.to_string()))?;
        let mut by_name: HashMap<&str, &Tensor> = self.records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut opt = AdamState::new(&store);
        opt.step = self.header.step;
        let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = by_name.remove(name).ok_or_else(|| Error::Mismatch(format!("record {name} is missing")))?;
            if t.shape() != like.shape() {
                return Err(Error::Mismatch(format!(
                    "record {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        for (i, p) in store.iter_mut().enumerate() {
            p.value = take(&p.name, &p.value)?;
            opt.m[i] = take(&format!("opt.m.{}", p.name), &opt.m[i])?;
            opt.v[i] = take(&format!("opt.v.{}", p.name), &opt.v[i])?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Mismatch(format!("record {extra} does not belong to this model")));
        }
        Ok((net, store, opt))
    }
}

fn model_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let (va, vb) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    let mut diffs = Vec::new();
    fn walk(p: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                for (k, av) in x {
                    let key = if p.is_empty() { k.clone() } else { format!("{p}.{k}") };
                    if let Some(bv) = y.get(k) {
                        walk(&key, av, bv, out);
                    }
                }
            }
            _ if a != b => out.push(format!("{p}: checkpoint {a}, requested {b}")),
            _ => {}
        }
    }
    walk("model", &va, &vb, &mut diffs);
    diffs.join("; ")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
