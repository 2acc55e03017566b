//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FMLA" 0x01 | u32 count | count × tensor | u32 CRC32 of everything before
//! tensor = u16 name_len | name (UTF-8) | u8 rank | rank × u32 dim | f32 payload
//! ```
//!
//! The model configuration travels as the tensor `meta.config`, one byte of
//! its `key = value` text per element. Batch-norm running statistics are
//! stored as `dcn.{i}.bn.running_mean` and `dcn.{i}.bn.running_var`.

use std::collections::HashMap;
use std::path::Path;

use crate::deform::RunningStats;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{FmlaModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMLA";
pub const VERSION: u8 = 0x01;
const CONFIG_TENSOR: &str = "meta.config";

/// Serialize a model. Values are narrowed to `f32`.
pub fn encode_checkpoint(model: &FmlaModel) -> Vec<u8> {
    let config = model.config().to_text();
    let config = Tensor::new(
        &[config.len()],
        config.bytes().map(f64::from).collect(),
    )
    .expect("length matches");
    let mut entries: Vec<(String, &Tensor)> = vec![(CONFIG_TENSOR.to_string(), &config)];
    for (spec, p) in model.specs().iter().zip(model.params()) {
        entries.push((spec.name.clone(), p));
    }
    let running: Vec<(String, Tensor)> = model
        .running()
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            [
                (format!("dcn.{i}.bn.running_mean"), Tensor::new(&[r.mean.len()], r.mean.clone())),
                (format!("dcn.{i}.bn.running_var"), Tensor::new(&[r.var.len()], r.var.clone())),
            ]
        })
        .map(|(n, t)| (n, t.expect("length matches")))
        .collect();
    entries.extend(running.iter().map(|(n, t)| (n.clone(), t)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse the tensor records; `buf` excludes nothing, so running out of
/// bytes anywhere (including the checksum) is a truncation.
fn parse_records(buf: &[u8]) -> std::result::Result<(Vec<(String, Tensor)>, usize), CheckpointError> {
    let mut r = Reader { buf, pos: 5 };
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: dims {dims:?} overflow")))?;
        let payload = r.take(len)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    r.take(4)?;
    Ok((out, r.pos))
}

/// Decode a checkpoint. Any damage yields an error; a model is returned only
/// when every check passed.
pub fn decode_checkpoint(buf: &[u8]) -> Result<FmlaModel> {
    let header = buf.len().min(4);
    if buf[..header] != MAGIC[..header] {
        return Err(CheckpointError::BadMagic.into());
    }
    if buf.len() < 5 {
        return Err(CheckpointError::Truncated {
            offset: buf.len(),
            needed: 5 - buf.len(),
            len: buf.len(),
        }
        .into());
    }
    if buf[4] != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: buf[4],
            expected: VERSION,
        }
        .into());
    }
    // Structure first, so a cut file reports truncation rather than a
    // checksum failure.
    let parsed = parse_records(buf);
    if let Err(e @ CheckpointError::Truncated { .. }) = parsed {
        return Err(e.into());
    }
    if buf.len() >= 4 {
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
        }
    }
    let (records, end) = parsed?;
    if end != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checksum",
            buf.len() - end
        ))
        .into());
    }
    build_model(records)
}

fn build_model(records: Vec<(String, Tensor)>) -> Result<FmlaModel> {
    let malformed = |m: String| Error::from(CheckpointError::Malformed(m));
    let mut map: HashMap<String, Tensor> = HashMap::with_capacity(records.len());
    for (name, t) in records {
        if map.insert(name.clone(), t).is_some() {
            return Err(malformed(format!("duplicate tensor {name}")));
        }
    }
    let config = map
        .remove(CONFIG_TENSOR)
        .ok_or_else(|| malformed(format!("missing {CONFIG_TENSOR}")))?;
    let bytes: Vec<u8> = config.data().iter().map(|&v| v as u8).collect();
    let text = String::from_utf8(bytes).map_err(|_| malformed("config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(&text)?;
    let mut params = Vec::new();
    for spec in crate::model::param_layout(&config) {
        let t = map
            .remove(&spec.name)
            .ok_or_else(|| malformed(format!("missing tensor {}", spec.name)))?;
        params.push(t);
    }
    let mut running = Vec::new();
    for i in 0..config.num_blocks {
        let mut get = |s: &str| {
            map.remove(&format!("dcn.{i}.bn.{s}"))
                .map(Tensor::into_data)
                .ok_or_else(|| malformed(format!("missing tensor dcn.{i}.bn.{s}")))
        };
        running.push(RunningStats {
            mean: get("running_mean")?,
            var: get("running_var")?,
        });
    }
    if let Some(extra) = map.keys().next() {
        return Err(malformed(format!("unexpected tensor {extra}")));
    }
    FmlaModel::from_parts(config, params, running).map_err(|e| malformed(e.to_string()))
}

pub fn save_checkpoint(model: &FmlaModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FmlaModel> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
