//! Binary model container shared by the classifier and the guard.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RFCK" | version u32 | tag (u16 len + utf8) | descriptor JSON (u32 len)
//! | config digest (u16 len + utf8) | epoch u32 | metrics JSON (u32 len)
//! | param count u32 | { name (u16 len) | kind u8 | rank u8 | dims u32… | f32 data }…
//! | crc32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Architecture family, e.g. `classifier` or `vae`.
    pub tag: String,
    pub descriptor: serde_json::Value,
    pub config_digest: String,
    pub epoch: u32,
    pub metrics: BTreeMap<String, f64>,
    pub params: ParamStore,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn short_str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn long_str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, String> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn str(&mut self, n: usize) -> std::result::Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.short_str(&self.tag);
        w.long_str(&self.descriptor.to_string());
        w.short_str(&self.config_digest);
        w.u32(self.epoch);
        w.long_str(&serde_json::to_string(&self.metrics).expect("finite metrics serialize"));
        w.u32(self.params.len() as u32);
        for (name, p) in self.params.iter() {
            w.short_str(name);
            w.u8(p.kind.tag());
            w.u8(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            for v in p.value.data() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([crc[0], crc[1], crc[2], crc[3]]);
        if crc32fast::hash(body) != stored {
            return Err("CRC mismatch".into());
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let n = r.u16()? as usize;
        let tag = r.str(n)?;
        let n = r.u32()? as usize;
        let descriptor = serde_json::from_str(&r.str(n)?).map_err(|e| e.to_string())?;
        let n = r.u16()? as usize;
        let config_digest = r.str(n)?;
        let epoch = r.u32()?;
        let n = r.u32()? as usize;
        let metrics = serde_json::from_str(&r.str(n)?).map_err(|e| e.to_string())?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.str(n)?;
            let kind = ParamKind::from_tag(r.u8()?).ok_or("unknown parameter kind")?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let len: usize = dims.iter().product();
            let data = r.take(len * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
            params.insert(name, kind, t).map_err(|e| e.to_string())?;
        }
        if r.pos != body.len() {
            return Err("trailing bytes".into());
        }
        Ok(Checkpoint { tag, descriptor, config_digest, epoch, metrics, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|r| Error::format(path, r))
    }
}
