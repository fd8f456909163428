//! Binary checkpoint format.
//!
//! ```text
//! "CVSC"                      4 bytes
//! version                     u32
//! config_len, config          u32 + canonical JSON
//! partitions_len, partitions  u32 + JSON (block name -> channel groups)
//! tensor_count                u32
//! per tensor:
//!   name_len, name            u32 + UTF-8
//!   dtype                     u8 (1 = f32, 2 = f64)
//!   rank                      u8
//!   dims                      rank × u64
//!   values                    numel × little-endian element
//! crc32                       u32 over every byte after the version field
//! ```
//!
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CvsError, Result};
use crate::model::{Model, ModelConfig};
use crate::retina::ChannelPartition;
use crate::tensor::{DType, Element, Shape, Tensor4D};

pub const MAGIC: &[u8; 4] = b"CVSC";
pub const FORMAT_VERSION: u32 = 1;

/// One named tensor decoded from a checkpoint, kept as f64 plus its stored dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Shape,
    pub raw: Vec<u8>,
}

impl StoredTensor {
    pub fn decode<T: Element>(&self) -> Tensor4D<T> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.raw.chunks_exact(size).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.raw.chunks_exact(size).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        Tensor4D::from_vec(self.shape, data).expect("length validated while parsing")
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointContents {
    pub version: u32,
    pub config_text: String,
    pub partitions: BTreeMap<String, ChannelPartition>,
    pub tensors: Vec<StoredTensor>,
}

impl CheckpointContents {
    pub fn config(&self) -> Result<ModelConfig> {
        ModelConfig::from_json(&self.config_text)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

pub fn encode<T: Element>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let body_start = out.len();
    put_block(&mut out, model.config.to_canonical_json()?.as_bytes());
    put_block(&mut out, serde_json::to_string(&model.partitions())?.as_bytes());
    put_u32(&mut out, model.params.len() as u32);
    for (_, p) in model.params.iter() {
        put_block(&mut out, p.name.as_bytes());
        out.push(T::DTYPE.code());
        let dims = p.value.shape().dims();
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out[body_start..]);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CvsError::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CvsError::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses and validates magic, version, structure and checksum.
pub fn decode(bytes: &[u8]) -> Result<CheckpointContents> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CvsError::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CvsError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < r.pos + 4 {
        return Err(CvsError::CorruptCheckpoint("truncated before checksum".into()));
    }
    let body = &bytes[r.pos..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());

    // Structure is parsed before the checksum is compared so that a file cut
    // short reports truncation rather than a checksum failure.
    let mut body_reader = Reader { bytes: body, pos: 0 };
    let parsed = parse_body(&mut body_reader, version);
    let computed = crc32fast::hash(body);
    match parsed {
        Ok(contents) if body_reader.pos == body.len() => {
            if stored != computed {
                return Err(CvsError::ChecksumMismatch { stored, computed });
            }
            Ok(contents)
        }
        Ok(_) => Err(CvsError::CorruptCheckpoint(format!("{} trailing bytes", body.len() - body_reader.pos))),
        Err(e) if stored != computed && !matches!(e, CvsError::CorruptCheckpoint(ref m) if m.starts_with("truncated")) => {
            Err(CvsError::ChecksumMismatch { stored, computed })
        }
        Err(e) => Err(e),
    }
}

fn parse_body(r: &mut Reader<'_>, version: u32) -> Result<CheckpointContents> {
    let config_text = r.text("config")?;
    let partitions_text = r.text("partition map")?;
    let partitions: BTreeMap<String, ChannelPartition> = serde_json::from_str(&partitions_text)
        .map_err(|e| CvsError::CorruptCheckpoint(format!("partition map: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.text("tensor name")?;
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| CvsError::CorruptCheckpoint(format!("tensor `{name}` has unknown dtype code {code}")))?;
        let rank = r.u8("rank")? as usize;
        if rank != 4 {
            return Err(CvsError::CorruptCheckpoint(format!("tensor `{name}` has rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u64("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let nbytes = shape
            .numel()
            .checked_mul(dtype.size())
            .ok_or_else(|| CvsError::CorruptCheckpoint(format!("tensor `{name}` dims overflow")))?;
        let raw = r.take(nbytes, "tensor values")?.to_vec();
        tensors.push(StoredTensor { name, dtype, shape, raw });
    }
    Ok(CheckpointContents { version, config_text, partitions, tensors })
}

/// Rebuilds the model described by the checkpoint and installs its tensors.
pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Model<T>> {
    let contents = decode(bytes)?;
    let config = contents.config()?;
    let mut model = Model::<T>::build(config)?;
    if contents.partitions != model.partitions() {
        return Err(CvsError::CorruptCheckpoint("partition map does not match the configured architecture".into()));
    }
    if contents.tensors.len() != model.params.len() {
        return Err(CvsError::CorruptCheckpoint(format!(
            "{} tensors stored, architecture has {}",
            contents.tensors.len(),
            model.params.len()
        )));
    }
    for t in &contents.tensors {
        let id = model
            .params
            .find(&t.name)
            .ok_or_else(|| CvsError::CorruptCheckpoint(format!("unknown tensor `{}`", t.name)))?;
        if model.params.value(id).shape() != t.shape {
            return Err(CvsError::CorruptCheckpoint(format!(
                "tensor `{}` has shape {}, architecture expects {}",
                t.name,
                t.shape,
                model.params.value(id).shape()
            )));
        }
        model.params.set_value(id, t.decode())?;
    }
    Ok(model)
}

pub fn save<T: Element>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    std::fs::write(path, bytes).map_err(|e| CvsError::io(path, e))
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CvsError::io(path, e))?;
    from_bytes(&bytes)
}
