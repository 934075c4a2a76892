use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GeneratorModel;
use crate::artifact::write_atomic;
use crate::disentangle::Discriminator;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFFE";
pub const CHECKPOINT_VERSION: u32 = 1;
const DISC_PREFIX: &str = "disc.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub vocab_hash: String,
    pub step: u64,
    /// Free-form description such as the baseline that produced the weights.
    pub label: String,
}

fn entries<'a>(store: &'a ParamStore, prefix: &'a str) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    store.iter().map(move |(_, p)| (format!("{prefix}{}", p.name), p.value.as_ref()))
}

/// Writes weights (plus optional discriminator weights under `disc.`).
pub fn save_checkpoint(
    path: &Path,
    model: &GeneratorModel,
    discriminator: Option<&Discriminator>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = entries(&model.params, "").collect();
    if let Some(d) = discriminator {
        tensors.extend(entries(&d.params, DISC_PREFIX));
    }
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.len() as u64;
    }
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn fill(store: &mut ParamStore, name: &str, value: Tensor) -> Result<()> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
    store
        .set(id, value)
        .map_err(|_| Error::Checkpoint(format!("shape mismatch for {name}")))
}

fn read_header(bytes: &[u8]) -> Result<(CheckpointMeta, Reader<'_>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    Ok((meta, r))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

/// Metadata of a checkpoint without loading its tensors.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = read_bytes(path)?;
    Ok(read_header(&bytes)?.0)
}

/// Loads weights into `model` (and `discriminator`, when given) after
/// checking the stored configuration and vocabulary hashes.
pub fn load_checkpoint(
    path: &Path,
    model: &mut GeneratorModel,
    vocab_hash: &str,
    discriminator: Option<&mut Discriminator>,
) -> Result<CheckpointMeta> {
    let bytes = read_bytes(path)?;
    let (meta, mut r) = read_header(&bytes)?;
    if meta.config_hash != model.config_hash() {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    if meta.vocab_hash != vocab_hash {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 name".into()))?;
        let (rows, cols, offset) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
        manifest.push((name, rows, cols, offset));
    }
    let data = &bytes[r.pos..];
    let mut loaded = model.params.clone();
    let mut disc_loaded = discriminator.as_deref().map(|d| d.params.clone());
    let mut seen = 0;
    for (name, rows, cols, offset) in manifest {
        let n = rows * cols;
        let raw = data
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("data for {name} out of bounds")))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(rows, cols, values)?;
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!("non-finite weights in {name}")));
        }
        if let Some(stripped) = name.strip_prefix(DISC_PREFIX) {
            if let Some(store) = disc_loaded.as_mut() {
                fill(store, stripped, t)?;
            }
        } else {
            fill(&mut loaded, &name, t)?;
            seen += 1;
        }
    }
    if seen != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} of {} model tensors",
            model.params.len()
        )));
    }
    model.params = loaded;
    if let (Some(d), Some(store)) = (discriminator, disc_loaded) {
        d.params = store;
    }
    Ok(meta)
}
