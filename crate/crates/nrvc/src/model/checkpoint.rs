//! Binary checkpoint format. Layout, all little-endian:
//!
//! ```text
//! magic "NRVCCKP1" | u32 format version | u64 meta length | meta JSON
//! | u64 tensor count | tensors
//! ```
//!
//! Each tensor is `u32 name length | name UTF-8 | u32 rows | u32 cols |
//! rows*cols f32 values` in row-major order. Every parameter contributes
//! three tensors: its values under the parameter name and the two Adam
//! moments under `<name>.m1` / `<name>.m2`. Raw f32 bits pass through
//! untouched, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"NRVCCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Completed optimizer steps at save time.
    pub step: u64,
    pub seed: u64,
    /// Full training configuration echo, including the model shape.
    pub config: TrainConfig,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

pub fn save_checkpoint(path: &Path, model: &mut Model, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors: Vec<(String, Array2<f32>)> = Vec::new();
    model.for_each_param(&mut |name, p| {
        tensors.push((name.clone(), p.v.clone()));
        tensors.push((format!("{name}.m1"), p.m1.clone()));
        tensors.push((format!("{name}.m2"), p.m2.clone()));
    });

    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| ckpt_err(path, format!("encode meta: {e}")))?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in &tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    buf: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ckpt_err(self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, buf, pos: 0 };

    if r.take(8)? != MAGIC {
        return Err(ckpt_err(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| ckpt_err(path, format!("decode meta: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err(path, "meta format version mismatch"));
    }

    let tensor_count = r.u64()? as usize;
    let mut tensors: BTreeMap<String, Array2<f32>> = BTreeMap::new();
    for _ in 0..tensor_count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ckpt_err(path, "tensor name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| ckpt_err(path, format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), arr).is_some() {
            return Err(ckpt_err(path, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != r.buf.len() {
        return Err(ckpt_err(path, "trailing bytes after tensors"));
    }

    meta.config.validate()?;
    let mut model = Model::new(&meta.config.model, meta.seed)?;
    let mut missing: Vec<String> = Vec::new();
    let mut consumed = 0usize;
    let mut shape_err: Option<String> = None;
    model.for_each_param(&mut |name, p| {
        for (suffix, slot) in
            [("", &mut p.v), (".m1", &mut p.m1), (".m2", &mut p.m2)]
        {
            let key = format!("{name}{suffix}");
            match tensors.get(&key) {
                Some(t) if t.raw_dim() == slot.raw_dim() => {
                    slot.assign(t);
                    consumed += 1;
                }
                Some(t) => {
                    shape_err.get_or_insert(format!(
                        "tensor {key}: expected {:?}, found {:?}",
                        slot.raw_dim(),
                        t.raw_dim()
                    ));
                }
                None => missing.push(key),
            }
        }
    });
    if let Some(msg) = shape_err {
        return Err(ckpt_err(path, msg));
    }
    if !missing.is_empty() {
        return Err(ckpt_err(path, format!("missing tensors: {}", missing.join(", "))));
    }
    if consumed != tensors.len() {
        return Err(ckpt_err(
            path,
            format!("{} tensors in file do not belong to this model", tensors.len() - consumed),
        ));
    }
    Ok((model, meta))
}
