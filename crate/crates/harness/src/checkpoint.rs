//! Binary container for named float tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CVPB"  u16 version  u32 meta_len  meta (UTF-8 JSON)
//! u32 entry_count
//! per entry: u16 name_len  name  u8 dtype (0 = f32)  u8 rank  u32 dims[rank]  u64 byte_offset
//! u64 payload_len  payload (f32 LE)
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use cvpb_core::models::{Backbone, BackboneConfig, ConvBlock, Mlp, RotationHead, SslHead};
use cvpb_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::io_err;

pub const MAGIC: &[u8; 4] = b"CVPB";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON describing what the tensors are.
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Integrity(format!("checkpoint: {}", detail.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("rank of {name} too large")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing CVPB magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(corrupt(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let meta_len = r.u32("meta length")? as usize;
        let meta = String::from_utf8(r.take(meta_len, "meta")?.to_vec()).map_err(|_| corrupt("meta is not UTF-8"))?;
        let count = r.u32("entry count")? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(corrupt(format!("{name}: unknown dtype {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64("offset")? as usize;
            dir.push((name, shape, offset));
        }
        let payload_len = r.u64("payload length")? as usize;
        let payload = r.take(payload_len, "payload")?;
        if r.pos != body.len() {
            return Err(corrupt(format!("{} trailing bytes before the CRC", body.len() - r.pos)));
        }
        let mut tensors = Vec::with_capacity(dir.len());
        for (name, shape, offset) in dir {
            let len: usize = shape.iter().product();
            let raw = offset
                .checked_add(4 * len)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| corrupt(format!("{name}: data outside the payload")))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect::<Vec<_>>();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| io_err(path, e))?)
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(i).1)
    }

    fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_str(&self.meta).map_err(|e| corrupt(format!("meta: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    kind: String,
    config: BackboneConfig,
    clean_accuracy: Option<f32>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    kind: String,
    tau: Option<f32>,
}

fn check_kind(found: &str, want: &str) -> Result<()> {
    if found != want {
        return Err(corrupt(format!("holds a {found}, expected a {want}")));
    }
    Ok(())
}

pub fn backbone_checkpoint(b: &Backbone) -> Result<Checkpoint> {
    let meta = BackboneMeta {
        kind: "backbone".into(),
        config: b.config.clone(),
        clean_accuracy: b.clean_accuracy,
        frozen: b.frozen,
    };
    Ok(Checkpoint {
        meta: serde_json::to_string(&meta).map_err(|e| Error::InvalidArgument(e.to_string()))?,
        tensors: b.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
    })
}

pub fn backbone_from_checkpoint(mut c: Checkpoint) -> Result<Backbone> {
    let meta: BackboneMeta = c.meta_as()?;
    check_kind(&meta.kind, "backbone")?;
    let mut b = Backbone::new(meta.config, 0)?;
    let mut blocks = Vec::with_capacity(b.blocks.len());
    for i in 0..b.blocks.len() {
        blocks.push(ConvBlock {
            weight: c.take(&format!("block{i}.weight"))?,
            gamma: c.take(&format!("block{i}.gamma"))?,
            beta: c.take(&format!("block{i}.beta"))?,
            running_mean: c.take(&format!("block{i}.running_mean"))?,
            running_var: c.take(&format!("block{i}.running_var"))?,
        });
    }
    let fresh = b.clone();
    b.blocks = blocks;
    b.fc_weight = c.take("fc.weight")?;
    b.fc_bias = c.take("fc.bias")?;
    b.clean_accuracy = meta.clean_accuracy;
    b.frozen = meta.frozen;
    let shapes_match = fresh
        .named_tensors()
        .iter()
        .zip(b.named_tensors())
        .all(|((_, a), (_, t))| a.shape() == t.shape());
    if !shapes_match {
        return Err(corrupt("tensor shapes do not match the stored backbone config"));
    }
    Ok(b)
}

fn mlp_tensors(m: &Mlp) -> Vec<(String, Tensor)> {
    vec![
        ("w1".into(), m.w1.clone()),
        ("b1".into(), m.b1.clone()),
        ("w2".into(), m.w2.clone()),
        ("b2".into(), m.b2.clone()),
    ]
}

fn mlp_from(c: &mut Checkpoint) -> Result<Mlp> {
    Ok(Mlp {
        w1: c.take("w1")?,
        b1: c.take("b1")?,
        w2: c.take("w2")?,
        b2: c.take("b2")?,
    })
}

fn head_meta(kind: &str, tau: Option<f32>) -> String {
    serde_json::to_string(&HeadMeta { kind: kind.into(), tau }).expect("plain struct serializes")
}

pub fn ssl_head_checkpoint(h: &SslHead) -> Checkpoint {
    Checkpoint {
        meta: head_meta("ssl_head", Some(h.tau)),
        tensors: mlp_tensors(&h.mlp),
    }
}

pub fn ssl_head_from_checkpoint(mut c: Checkpoint) -> Result<SslHead> {
    let meta: HeadMeta = c.meta_as()?;
    check_kind(&meta.kind, "ssl_head")?;
    Ok(SslHead {
        mlp: mlp_from(&mut c)?,
        tau: meta.tau.unwrap_or(SslHead::DEFAULT_TAU),
    })
}

pub fn rotation_head_checkpoint(h: &RotationHead) -> Checkpoint {
    Checkpoint {
        meta: head_meta("rotation_head", None),
        tensors: mlp_tensors(&h.mlp),
    }
}

pub fn rotation_head_from_checkpoint(mut c: Checkpoint) -> Result<RotationHead> {
    let meta: HeadMeta = c.meta_as()?;
    check_kind(&meta.kind, "rotation_head")?;
    Ok(RotationHead { mlp: mlp_from(&mut c)? })
}
