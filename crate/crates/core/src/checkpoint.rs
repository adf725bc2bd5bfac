//! Single-file checkpoints: magic, a TOML manifest, then named f32 arrays.
//!
//! Layout (little endian): `MIPKDCK1`, `u32` manifest length, manifest bytes,
//! `u32` array count, then per array `u32` name length, name, `u32` rank,
//! `rank` dims as `u32`, and the `f32` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{NetworkSpec, Role, SrModel};
use crate::error::{Error, Result};
use crate::metrics::{Bicubic, Upscaler};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"MIPKDCK1";

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Bicubic,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub scale: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<NetworkSpec>,
    pub iteration: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn for_model(model: &SrModel<f32>, iteration: usize, seed: u64) -> Self {
        Self {
            kind: CheckpointKind::Model,
            scale: model.spec().scale,
            role: Some(model.role()),
            spec: Some(model.spec().clone()),
            iteration,
            seed,
        }
    }

    pub fn bicubic(scale: usize) -> Self {
        Self {
            kind: CheckpointKind::Bicubic,
            scale,
            role: None,
            spec: None,
            iteration: 0,
            seed: 0,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(manifest: &Manifest, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let text = toml::to_string(manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut out = Vec::with_capacity(16 + text.len() + 4 * params.numel());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        put_u32(&mut out, dims.len())?;
        for d in dims {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, ParamStore<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format(format!("array name: {e}")))?
            .to_string();
        let rank = r.u32()?;
        if rank != 4 {
            return Err(Error::Format(format!("{name}: rank {rank}, expected 4")));
        }
        let d = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let shape = Shape::new(d[0], d[1], d[2], d[3]);
        let raw = r.take(shape.numel() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((manifest, params))
}

pub fn save(path: &Path, manifest: &Manifest, params: &ParamStore<f32>) -> Result<()> {
    let bytes = encode(manifest, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Manifest, ParamStore<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_model(path: &Path, model: &SrModel<f32>, iteration: usize, seed: u64) -> Result<()> {
    save(path, &Manifest::for_model(model, iteration, seed), model.params())
}

/// Loads a network checkpoint as a model with the recorded role.
pub fn load_model(path: &Path) -> Result<SrModel<f32>> {
    let (manifest, params) = load(path)?;
    let spec = match (manifest.kind, manifest.spec) {
        (CheckpointKind::Model, Some(spec)) => spec,
        _ => {
            return Err(Error::Format(format!(
                "{} holds no network",
                path.display()
            )))
        }
    };
    SrModel::from_params(spec, manifest.role.unwrap_or(Role::Student), &params)
}

/// Loads any checkpoint, including the bicubic pseudo-checkpoint, as an
/// upscaler.
pub fn load_upscaler(path: &Path) -> Result<Box<dyn Upscaler>> {
    let (manifest, _) = load(path)?;
    match manifest.kind {
        CheckpointKind::Bicubic => Ok(Box::new(Bicubic { scale: manifest.scale })),
        CheckpointKind::Model => Ok(Box::new(load_model(path)?)),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
