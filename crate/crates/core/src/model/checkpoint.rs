//! Binary checkpoint archive.
//!
//! ```text
//! "LFSM" | u32 version
//! repeated: u32 name_len | name (UTF-8) | u8 group | u8 dtype | u32 rank | rank × u32 dim | data
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All values little-endian. Parameter tensors use dtype 0 (f64) and group
//! tags 0..=3 (E, S, B, N). The first record, `__meta__`, is a dtype 1 (u8)
//! JSON blob with group tag 0xFF describing the architecture and heads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchSpec, Group, Head, Model, Param};
use crate::error::{Error, Result};
use crate::geometry::ClassId;

pub const VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LFSM";
const META_NAME: &str = "__meta__";
const META_GROUP: u8 = 0xFF;
const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    arch: ArchSpec,
    seed: u64,
    heads: Vec<Head>,
    novel_classes: Vec<ClassId>,
}

fn put_record(buf: &mut Vec<u8>, name: &str, group: u8, dtype: u8, shape: &[usize]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(group);
    buf.push(dtype);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + model.num_elements() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&Meta {
        arch: model.arch.clone(),
        seed: model.seed,
        heads: model.heads.clone(),
        novel_classes: model.novel_classes.clone(),
    })
    .expect("meta serializes");
    put_record(&mut buf, META_NAME, META_GROUP, DTYPE_U8, &[meta.len()]);
    buf.extend_from_slice(&meta);
    for p in &model.params {
        put_record(&mut buf, &p.name, p.group.tag(), DTYPE_F64, &p.shape);
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checkpoint CRC mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut meta: Option<Meta> = None;
    let mut params = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let group = r.u8()?;
        let dtype = r.u8()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        match (dtype, group) {
            (DTYPE_U8, META_GROUP) if name == META_NAME => {
                meta = Some(serde_json::from_slice(r.take(count)?)?);
            }
            (DTYPE_F64, tag) => {
                let group = Group::from_tag(tag).ok_or_else(|| Error::Format(format!("bad group tag {tag} on {name}")))?;
                let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                params.push(Param { name, group, shape, data });
            }
            _ => return Err(Error::Format(format!("unsupported record {name} (dtype {dtype}, group {group})"))),
        }
    }
    let meta = meta.ok_or_else(|| Error::Format("checkpoint has no metadata record".into()))?;
    let model = Model {
        arch: meta.arch,
        seed: meta.seed,
        heads: meta.heads,
        novel_classes: meta.novel_classes,
        params,
    };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::load(path, e))
}

/// SHA-256 over name, shape and data of every tensor in `group`, in order.
pub fn group_hash(model: &Model, group: Group) -> String {
    let mut h = Sha256::new();
    for p in model.params.iter().filter(|p| p.group == group) {
        h.update((p.name.len() as u32).to_le_bytes());
        h.update(p.name.as_bytes());
        for &d in &p.shape {
            h.update((d as u32).to_le_bytes());
        }
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
