//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `MATRNCKP` magic, `u32` version, `u8` dtype width, `u64` epoch,
//! `u32` + bytes config text, `u32` tensor count, then per tensor
//! `u16` + bytes name, `u8` dtype width, `u8` rank, `u32` dims and the `u64`
//! byte offset of its values within the payload; then the payload (every
//! tensor's values in manifest order) and a trailing `u32` CRC-32 of everything
//! before it.

use std::fs;
use std::path::Path;

use matrn_tensor::{DType, Float};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Matrn;

const MAGIC: &[u8; 8] = b"MATRNCKP";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: Config,
    pub epoch: usize,
    pub dtype: DType,
    /// `(name, shape, values)` in store order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn encode<F: Float>(model: &Matrn<F>, config: &Config, epoch: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(F::DTYPE.size_in_bytes() as u8);
    out.extend_from_slice(&(epoch as u64).to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    let width = F::DTYPE.size_in_bytes();
    let mut offset = 0u64;
    for (_, name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(width as u8);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.numel() * width) as u64;
    }
    for (_, _, t) in model.store.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    let mut r = Reader { bytes: body, at: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = match r.u8()? {
        4 => DType::F32,
        8 => DType::F64,
        w => return Err(Error::Checkpoint(format!("unknown value width {w}"))),
    };
    let epoch = r.u64()? as usize;
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    let config = Config::parse(&text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let count = r.u32()? as usize;
    let width = dtype.size_in_bytes();
    let mut manifest = Vec::with_capacity(count);
    let mut expected = 0u64;
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.string(n)?;
        if r.u8()? as usize != width {
            return Err(Error::Checkpoint(format!("`{name}` has a different value width than the file")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        if offset != expected {
            return Err(Error::Checkpoint(format!("`{name}` at payload offset {offset}, expected {expected}")));
        }
        expected += (shape.iter().product::<usize>() * width) as u64;
        manifest.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        tensors.push((name, shape, values));
    }
    if r.at != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok(Checkpoint { config, epoch, dtype, tensors })
}

impl Checkpoint {
    /// Rebuilds the model and overwrites every parameter, checking names and shapes.
    pub fn into_model<F: Float>(&self) -> Result<Matrn<F>> {
        let mut model = Matrn::<F>::new(&self.config.model, self.config.train.seed)?;
        if model.store.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for (name, shape, values) in &self.tensors {
            let id = model.store.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            let t = model.store.tensor_mut(id);
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {shape:?}, model expects {:?}", t.shape())));
            }
            for (dst, &v) in t.data_mut().iter_mut().zip(values) {
                *dst = F::from_f64_lossy(v);
            }
        }
        Ok(model)
    }
}

/// Writes atomically through a sibling temporary file.
pub fn save<F: Float>(path: &Path, model: &Matrn<F>, config: &Config, epoch: usize) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model, config, epoch)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
