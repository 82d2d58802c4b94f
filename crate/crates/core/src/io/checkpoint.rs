//! HSCK checkpoints: a flat list of named little-endian `f32` tensors.
//!
//! Layout: `b"HSCK"`, `u32` version (1), `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u8` dtype (1 = f32), `u8` rank,
//! `rank × u32` extents and the payload. Integers are little-endian.
//! Model parameters are written in registration order, followed by every
//! batch-norm layer's `<layer>.running_mean` and `<layer>.running_var`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::IoError;
use crate::resnet::{BlockKind, Model, ModelSpec};

pub const MAGIC: &[u8; 4] = b"HSCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub extents: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Every parameter and running statistic of `model`.
    pub fn from_model(model: &Model) -> Self {
        let mut entries: Vec<CheckpointEntry> = model
            .params()
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                extents: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        for (layer, rs) in model.running_stats() {
            for (suffix, v) in [("running_mean", &rs.mean), ("running_var", &rs.var)] {
                entries.push(CheckpointEntry {
                    name: format!("{layer}.{suffix}"),
                    extents: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
        Self { entries }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, IoError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(ckpt.entries.len()).map_err(fmt_err)?.to_le_bytes());
    for e in &ckpt.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(IoError::Format(format!("duplicate tensor name {:?}", e.name)));
        }
        let n: usize = e.extents.iter().product();
        if n != e.data.len() {
            return Err(IoError::Format(format!(
                "tensor {:?}: extents {:?} hold {n} values, payload has {}",
                e.name,
                e.extents,
                e.data.len()
            )));
        }
        out.extend_from_slice(&u32::try_from(e.name.len()).map_err(fmt_err)?.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(u8::try_from(e.extents.len()).map_err(fmt_err)?);
        for &x in &e.extents {
            out.extend_from_slice(&u32::try_from(x).map_err(fmt_err)?.to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn fmt_err(e: std::num::TryFromIntError) -> IoError {
    IoError::Format(format!("value does not fit the HSCK field: {e}"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(IoError::TruncatedFile {
            needed: self.at.saturating_add(n),
            got: self.bytes.len(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, IoError> {
    let mut c = Cursor { bytes, at: 0 };
    let magic = c.take(4).map_err(|_| IoError::BadMagic("file shorter than the HSCK magic".into()))?;
    if magic != MAGIC {
        return Err(IoError::BadMagic(format!("{magic:?}, expected \"HSCK\"")));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(IoError::VersionUnsupported(version));
    }
    let count = c.u32()? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| IoError::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(IoError::Format(format!("duplicate tensor name {name:?}")));
        }
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(IoError::Format(format!("tensor {name:?}: unsupported dtype code {dtype}")));
        }
        let rank = c.u8()? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(c.u32()? as usize);
        }
        let n = extents
            .iter()
            .try_fold(1usize, |a, &x| a.checked_mul(x))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| IoError::Format(format!("tensor {name:?}: extents overflow")))?;
        let data = c
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        entries.push(CheckpointEntry { name, extents, data });
    }
    if c.at != bytes.len() {
        return Err(IoError::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - c.at
        )));
    }
    Ok(Checkpoint { entries })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(&Checkpoint::from_model(model))?;
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

/// Copies every parameter and running statistic of `model` from `ckpt`.
/// Nothing is modified unless all tensors are present with matching extents.
/// Entries the model does not know are skipped with a logged notice.
pub fn apply_checkpoint(ckpt: &Checkpoint, model: &mut Model) -> Result<(), IoError> {
    let mut wanted: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    for (layer, rs) in model.running_stats() {
        wanted.push((format!("{layer}.running_mean"), vec![rs.mean.len()]));
        wanted.push((format!("{layer}.running_var"), vec![rs.var.len()]));
    }
    for (name, expected) in &wanted {
        let e = ckpt.get(name).ok_or_else(|| IoError::MissingTensor(name.clone()))?;
        if &e.extents != expected {
            return Err(IoError::ShapeMismatch {
                name: name.clone(),
                expected: expected.clone(),
                found: e.extents.clone(),
            });
        }
    }
    let known: HashSet<&str> = wanted.iter().map(|(n, _)| n.as_str()).collect();
    for e in &ckpt.entries {
        if !known.contains(e.name.as_str()) {
            log::info!("checkpoint entry {:?} is not used by the model; ignored", e.name);
        }
    }
    for (name, t) in model.params_mut() {
        let e = ckpt.get(name).expect("presence checked");
        t.data_mut().copy_from_slice(&e.data);
    }
    let layers: Vec<String> = model.running_stats().keys().cloned().collect();
    for layer in layers {
        let mean = &ckpt.get(&format!("{layer}.running_mean")).expect("presence checked").data;
        let var = &ckpt.get(&format!("{layer}.running_var")).expect("presence checked").data;
        let rs = model.running_stats_mut(&layer).expect("layer exists");
        rs.mean.copy_from_slice(mean);
        rs.var.copy_from_slice(var);
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, model: &mut Model) -> Result<(), IoError> {
    apply_checkpoint(&read_checkpoint(path)?, model)
}

/// Reconstructs the architecture a checkpoint was saved from.
pub fn infer_spec(ckpt: &Checkpoint) -> Result<ModelSpec, IoError> {
    let stem = ckpt
        .get("stem.conv.weight")
        .ok_or_else(|| IoError::MissingTensor("stem.conv.weight".into()))?;
    let base = *stem
        .extents
        .first()
        .ok_or_else(|| IoError::Format("stem.conv.weight has rank 0".into()))?;
    let kind = if ckpt.get("stage1.block1.conv3.weight").is_some() {
        BlockKind::Bottleneck
    } else {
        BlockKind::Basic
    };
    let mut blocks = [0usize; 4];
    for (s, count) in blocks.iter_mut().enumerate() {
        while ckpt
            .get(&format!("stage{}.block{}.conv1.weight", s + 1, *count + 1))
            .is_some()
        {
            *count += 1;
        }
    }
    let depth = match (kind, blocks) {
        (BlockKind::Basic, [2, 2, 2, 2]) => 18,
        (BlockKind::Basic, [3, 4, 6, 3]) => 34,
        (BlockKind::Bottleneck, [3, 4, 6, 3]) => 50,
        _ => {
            return Err(IoError::Format(format!(
                "checkpoint has {kind:?} blocks {blocks:?}, which is not ResNet-18/34/50"
            )))
        }
    };
    Ok(ModelSpec::resnet(depth, base)?)
}
