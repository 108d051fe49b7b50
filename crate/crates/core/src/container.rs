//! Binary tensor container used for checkpoints and the segment cache.
//!
//! ```text
//! magic      4 bytes  "SCTN"
//! version    u16 LE
//! manifest   u32 LE byte length, then:
//!              meta_len u32, meta (UTF-8 JSON)
//!              count u32
//!              count x { name_len u16, name (UTF-8), rank u8, dims u32 x rank, offset u64 }
//! payload    f32 LE values; `offset` is the byte offset of each tensor from
//!            the start of the payload, tensors stored back to back
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, SegmentSample, SourceId};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{Tensor, MAX_RANK};
use crate::scene::Scene;
use crate::weights::ModelWeights;

pub const MAGIC: &[u8; 4] = b"SCTN";
pub const VERSION: u16 = 1;

/// Named `f32` tensors plus a free-form JSON metadata string.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: String,
    pub entries: IndexMap<String, Tensor<f32>>,
}

fn bad(message: impl Into<String>) -> Error {
    Error::format(None, message)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("manifest string is not UTF-8"))
    }
}

impl Container {
    pub fn new(meta: impl Into<String>) -> Self {
        Container {
            meta: meta.into(),
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("entry name of {} bytes is too long", name.len())));
        }
        if self.entries.insert(name.clone(), tensor).is_some() {
            return Err(Error::Config(format!("duplicate container entry {name}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .ok_or_else(|| bad(format!("container has no entry {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::new();
        manifest.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        manifest.extend_from_slice(self.meta.as_bytes());
        manifest.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            manifest.extend_from_slice(&(name.len() as u16).to_le_bytes());
            manifest.extend_from_slice(name.as_bytes());
            manifest.push(t.rank() as u8);
            for &d in t.shape() {
                manifest.extend_from_slice(&(d as u32).to_le_bytes());
            }
            manifest.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        let mut out = Vec::with_capacity(10 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("not an SCTN container (bad magic)"));
        }
        let version = c.u16()?;
        if version != VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let manifest_len = c.u32()? as usize;
        let payload_start = c.pos + manifest_len;
        if payload_start > bytes.len() {
            return Err(bad("manifest extends past end of file"));
        }
        let meta_len = c.u32()? as usize;
        let meta = c.string(meta_len)?;
        let count = c.u32()? as usize;
        let mut layout = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = c.u16()? as usize;
            let name = c.string(name_len)?;
            let rank = c.u8()? as usize;
            if rank > MAX_RANK {
                return Err(bad(format!("entry {name} has rank {rank} > {MAX_RANK}")));
            }
            let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = c.u64()?;
            layout.push((name, shape, offset));
        }
        if c.pos != payload_start {
            return Err(bad("manifest length does not match its contents"));
        }
        let payload = &bytes[payload_start..];
        let mut expected = 0u64;
        let mut out = Container::new(meta);
        for (name, shape, offset) in layout {
            if offset != expected {
                return Err(bad(format!("entry {name} at offset {offset}, expected {expected}")));
            }
            let numel: usize = shape.iter().product();
            let start = offset as usize;
            let end = start + 4 * numel;
            if end > payload.len() {
                return Err(bad(format!("entry {name} extends past end of payload")));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("entry {name}: {e}")))?;
            out.insert(name, tensor).map_err(|e| bad(e.to_string()))?;
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::file(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::file(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { line, message, .. } => Error::Format {
                path: Some(path.to_path_buf()),
                line,
                message,
            },
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: ModelConfig,
}

/// Checkpoint: model configuration in the metadata, one entry per weight.
pub fn checkpoint(model: &Model<f32>) -> Container {
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        config: model.config().clone(),
    };
    let mut c = Container::new(serde_json::to_string(&meta).expect("config serializes"));
    for (name, t) in model.weights().iter() {
        c.insert(name, t.clone()).expect("registry names are unique");
    }
    c
}

pub fn restore_model(c: &Container) -> Result<Model<f32>> {
    let meta: CheckpointMeta =
        serde_json::from_str(&c.meta).map_err(|e| bad(format!("checkpoint metadata: {e}")))?;
    if meta.kind != "checkpoint" {
        return Err(bad(format!("container holds a {}, not a checkpoint", meta.kind)));
    }
    let mut w = ModelWeights::new();
    for (name, t) in &c.entries {
        w.insert(name.clone(), t.clone())?;
    }
    Model::from_weights(meta.config, w).map_err(|e| bad(format!("checkpoint does not match its config: {e}")))
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    checkpoint(model).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    restore_model(&Container::load(path)?)
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    kind: String,
    seed: u64,
    splits: Vec<(String, Vec<SampleMeta>)>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    source: SourceId,
    target_index: usize,
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Segment cache with entries `{split}/{index:06}/{positions,mask,origin}`.
pub fn segment_cache(split: &DatasetSplit) -> Result<Container> {
    let parts = [&split.train, &split.val, &split.test];
    let meta = CacheMeta {
        kind: "segments".into(),
        seed: split.seed,
        splits: SPLIT_NAMES
            .iter()
            .zip(parts)
            .map(|(name, samples)| {
                let m = samples
                    .iter()
                    .map(|s| SampleMeta {
                        source: s.source.clone(),
                        target_index: s.scene.target_index(),
                    })
                    .collect();
                (name.to_string(), m)
            })
            .collect(),
    };
    let mut c = Container::new(serde_json::to_string(&meta).expect("metadata serializes"));
    for (name, samples) in SPLIT_NAMES.iter().zip(parts) {
        for (i, s) in samples.iter().enumerate() {
            let sc = &s.scene;
            c.insert(format!("{name}/{i:06}/positions"), sc.positions_tensor()?)?;
            c.insert(format!("{name}/{i:06}/mask"), sc.mask_tensor()?)?;
            c.insert(format!("{name}/{i:06}/origin"), Tensor::from_f64(&[2], &sc.origin())?)?;
        }
    }
    Ok(c)
}

pub fn restore_split(c: &Container) -> Result<DatasetSplit> {
    let meta: CacheMeta = serde_json::from_str(&c.meta).map_err(|e| bad(format!("segment cache metadata: {e}")))?;
    if meta.kind != "segments" {
        return Err(bad(format!("container holds a {}, not a segment cache", meta.kind)));
    }
    let mut parts: Vec<Vec<SegmentSample>> = Vec::new();
    for (name, samples) in &meta.splits {
        let mut out = Vec::with_capacity(samples.len());
        for (i, sm) in samples.iter().enumerate() {
            let pos = c.get(&format!("{name}/{i:06}/positions"))?;
            let mask = c.get(&format!("{name}/{i:06}/mask"))?;
            let origin = c.get(&format!("{name}/{i:06}/origin"))?;
            let &[agents, frames, 2] = pos.shape() else {
                return Err(bad(format!("{name}/{i:06}/positions has shape {:?}", pos.shape())));
            };
            if origin.numel() != 2 {
                return Err(bad(format!("{name}/{i:06}/origin must hold 2 values")));
            }
            let scene = Scene::new(
                agents,
                frames,
                pos.to_f64_vec(),
                mask.data().iter().map(|&m| m != 0.0).collect(),
                sm.target_index,
            )?
            .with_origin([origin.data()[0] as f64, origin.data()[1] as f64]);
            out.push(SegmentSample {
                scene,
                source: sm.source.clone(),
            });
        }
        parts.push(out);
    }
    if parts.len() != 3 {
        return Err(bad("segment cache must hold train, val and test splits"));
    }
    let test = parts.pop().expect("3 parts");
    let val = parts.pop().expect("2 parts");
    let train = parts.pop().expect("1 part");
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Container::new("{\"k\":1}");
        c.insert("a", Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 1e-7, 0.0, 7.0]).unwrap()).unwrap();
        c.insert("b/c", Tensor::scalar(0.1f32).unwrap()).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SCTN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let mut c = Container::new("");
        c.insert("w", Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Container::from_bytes(&wrong_magic).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(Container::from_bytes(&version), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_restores_model() {
        let model = Model::<f32>::new(ModelConfig::toy()).unwrap();
        let back = restore_model(&Container::from_bytes(&checkpoint(&model).to_bytes()).unwrap()).unwrap();
        assert_eq!(back.weights(), model.weights());
        assert_eq!(back.config(), model.config());
    }
}
