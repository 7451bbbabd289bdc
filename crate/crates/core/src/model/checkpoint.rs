//! Single-file checkpoint.
//!
//! ```text
//! "APAMCKPT" | u32 version | u32 entry count | entries | sha256 of all prior bytes
//! entry: u8 tag | u32 name length | name
//!   tag 0 (json):   u64 length | utf-8 bytes
//!   tag 1 (tensor): u8 dtype (1 = f64) | u32 rank | u64 dims[rank] | little-endian payload
//! ```
//!
//! The first entry is `config.json`; tensors follow in parameter order and
//! are grouped by their `backbone/`, `fpn/`, `apam/` and `heads/` prefixes.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"APAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const TAG_JSON: u8 = 0;
const TAG_TENSOR: u8 = 1;
const DTYPE_F64: u8 = 1;

/// Contents of `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Free-form run metadata (data paths, class names, split seed, epoch).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn put_name(buf: &mut Vec<u8>, tag: u8, name: &str) {
    buf.push(tag);
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

pub fn save_checkpoint(model: &Model, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let entries = model.store.entries();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&((entries.len() + 1) as u32).to_le_bytes());
    put_name(&mut buf, TAG_JSON, "config.json");
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in entries {
        put_name(&mut buf, TAG_TENSOR, &e.name);
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
        for &d in e.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "length overflow"))
    }
}

/// Validated checkpoint body: header plus named tensors.
fn parse(path: &Path) -> Result<(CheckpointHeader, Vec<(String, ArrayD<f64>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::format(path, "checkpoint is truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(format!("{} is truncated or corrupted", path.display())));
    }
    let mut r = Reader { buf: body, pos: 12, path };
    let count = r.u32()? as usize;
    let mut header = None;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = r.u8()?;
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::format(path, "bad entry name"))?;
        match tag {
            TAG_JSON => {
                let len = r.len()?;
                let raw = r.take(len)?;
                if name == "config.json" {
                    header = Some(
                        serde_json::from_slice::<CheckpointHeader>(raw)
                            .map_err(|e| Error::format(path, format!("config.json: {e}")))?,
                    );
                }
            }
            TAG_TENSOR => {
                if r.u8()? != DTYPE_F64 {
                    return Err(Error::format(path, format!("tensor {name} has an unsupported dtype")));
                }
                let rank = r.u32()? as usize;
                let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
                let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let count = count.ok_or_else(|| Error::format(path, "tensor size overflow"))?;
                let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::format(path, "tensor size overflow"))?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                tensors.push((name, ArrayD::from_shape_vec(IxDyn(&dims), data).expect("counted payload")));
            }
            other => return Err(Error::format(path, format!("unknown entry tag {other}"))),
        }
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after the last entry"));
    }
    let header = header.ok_or_else(|| Error::format(path, "missing config.json"))?;
    Ok((header, tensors))
}

/// Reads only the header; cheap enough for config checks before heavy work.
pub fn read_checkpoint_config(path: &Path) -> Result<CheckpointHeader> {
    Ok(parse(path)?.0)
}

/// Rebuilds the model described by the header and fills every tensor.
/// When `expected` is given, the stored config must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, CheckpointHeader)> {
    let (header, tensors) = parse(path)?;
    if let Some(exp) = expected {
        if exp != &header.model {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different model config ({} classes, {:?}/{:?}); expected {} classes, {:?}/{:?}",
                path.display(),
                header.model.n_classes,
                header.model.attention,
                header.model.fpn,
                exp.n_classes,
                exp.attention,
                exp.fpn
            )));
        }
    }
    let mut model = Model::new(&header.model)?;
    let mut seen = vec![false; model.store.entries().len()];
    for (name, value) in tensors {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::format(path, format!("unexpected tensor {name}")))?;
        if model.store.value(id).shape() != value.shape() {
            return Err(Error::format(
                path,
                format!("tensor {name} has shape {:?}, model needs {:?}", value.shape(), model.store.value(id).shape()),
            ));
        }
        *model.store.value_mut(id) = value;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::format(
            path,
            format!("missing tensor {}", model.store.entries()[i].name),
        ));
    }
    Ok((model, header))
}
