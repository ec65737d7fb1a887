//! Binary checkpoint container.
//!
//! ```text
//! magic "AANC" | version u16 | meta_len u32 | meta (JSON, UTF-8)
//! tensor_count u32 | tensors...
//! tensor: name_len u32 | name | rank u32 | dims u32 x rank | values f64 LE
//! ```
//!
//! Values are stored as 64-bit floats regardless of the training precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CoOccurrencePrior, Model};
use crate::numerics::{AdamConfig, AdamState, Tensor};
use crate::scalar::Scalar;
use crate::train::config::TrainConfig;
use crate::train::scheduler::PlateauScheduler;
use crate::train::state::ModelState;

const MAGIC: &[u8; 4] = b"AANC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    epoch: usize,
    scalar_bytes: u8,
    adam: AdamConfig,
    adam_steps: u64,
    scheduler: PlateauScheduler,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint<S: Scalar>(state: &ModelState<S>) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        config: state.config.clone(),
        epoch: state.epoch,
        scalar_bytes: S::BYTES,
        adam: state.optimizer.config,
        adam_steps: state.optimizer.step_count,
        scheduler: state.scheduler.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    let mut tensors: Vec<(String, &Tensor<S>)> = Vec::new();
    state.model.visit(|n, _, t| tensors.push((n.to_string(), t)));
    for (name, (m, v)) in &state.optimizer.moments {
        tensors.push((format!("adam.m.{name}"), m));
        tensors.push((format!("adam.v.{name}"), v));
    }
    put_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

fn read_meta(r: &mut Reader) -> Result<Meta> {
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()?;
    serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("unreadable metadata: {e}")))
}

/// Width in bytes of the scalar type the checkpoint was trained with.
pub fn checkpoint_scalar_bytes(bytes: &[u8]) -> Result<u8> {
    Ok(read_meta(&mut Reader { bytes, pos: 0 })?.scalar_bytes)
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<ModelState<S>> {
    let mut r = Reader { bytes, pos: 0 };
    let meta = read_meta(&mut r)?;
    meta.config.validate()?;

    let mut stored = BTreeMap::new();
    for _ in 0..r.u32()? {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        stored.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let cfg = &meta.config.model;
    let mut model = Model::<S>::init(cfg.clone(), &CoOccurrencePrior::empty(cfg.attributes), 0)?;
    let mut problems = Vec::new();
    model.visit_mut(|name, _, t| match stored.remove(name) {
        Some(s) if s.shape() == t.shape() => *t = s,
        Some(s) => problems.push(format!("{name}: expected {:?}, found {:?}", t.shape(), s.shape())),
        None => problems.push(format!("{name}: missing")),
    });
    let mut optimizer = AdamState::new(meta.adam);
    optimizer.step_count = meta.adam_steps;
    let mut shapes = BTreeMap::new();
    model.visit(|n, _, t| {
        shapes.insert(n.to_string(), t.shape().to_vec());
    });
    let moment_names: Vec<String> = stored
        .keys()
        .filter_map(|k| k.strip_prefix("adam.m.").map(str::to_string))
        .collect();
    for name in moment_names {
        let m = stored.remove(&format!("adam.m.{name}"));
        let v = stored.remove(&format!("adam.v.{name}"));
        match (m, v, shapes.get(&name)) {
            (Some(m), Some(v), Some(shape)) if m.shape() == shape.as_slice() && v.shape() == shape.as_slice() => {
                optimizer.moments.insert(name, (m, v));
            }
            _ => problems.push(format!("adam moments of {name}: missing or mis-shaped")),
        }
    }
    problems.extend(stored.keys().map(|k| format!("{k}: unexpected")));
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!("shape table mismatch: {}", problems.join("; "))));
    }
    Ok(ModelState {
        config: meta.config,
        model,
        optimizer,
        scheduler: meta.scheduler,
        epoch: meta.epoch,
    })
}

pub fn save_checkpoint<S: Scalar>(state: &ModelState<S>, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(state)?)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelState<S>> {
    let bytes = fs::read(path).map_err(|e| crate::data::missing_or_io(path, e))?;
    decode_checkpoint(&bytes)
}
