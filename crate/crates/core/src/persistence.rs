//! Bit-exact little-endian serialization for tensors ("FVT" files) and
//! named parameter sets, plus the FNV-1a checksum used in run manifests.
//!
//! Tensor layout: magic "FVT1" | version u8 | dtype u8 (1 real, 2 complex
//! interleaved) | ndim u8 | reserved u8=0 | ndim × u32 dims | f64 payload.
//! ParamSet container: u32 entry count, then per entry u16 path length,
//! UTF-8 path bytes, embedded tensor record; paths in lexicographic order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"FVT1";

fn write_tensor_bytes(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(1u8);
    out.push(if t.is_complex() { 2 } else { 1 });
    out.push(t.dims().len() as u8);
    out.push(0u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.data().len());
    write_tensor_bytes(t, &mut out);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.pos as u64, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_tensor(c: &mut Cursor) -> Result<Tensor> {
    let at = c.pos as u64;
    if c.take(4)? != MAGIC {
        return Err(Error::format(at, "bad magic"));
    }
    let version = c.u8()?;
    if version != 1 {
        return Err(Error::format(c.pos as u64 - 1, format!("unsupported version {version}")));
    }
    let dtype = c.u8()?;
    if dtype != 1 && dtype != 2 {
        return Err(Error::format(c.pos as u64 - 1, format!("unsupported dtype {dtype}")));
    }
    let ndim = c.u8()? as usize;
    let reserved = c.u8()?;
    if reserved != 0 {
        return Err(Error::format(c.pos as u64 - 1, "nonzero reserved byte"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(c.u32()? as usize);
    }
    let n: usize = dims.iter().product::<usize>() * if dtype == 2 { 2 } else { 1 };
    let raw = c.take(8 * n)?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if dtype == 2 {
        Tensor::complex_from_vec(&dims, data)
    } else {
        Tensor::from_vec(&dims, data)
    }
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { buf, pos: 0 };
    let t = read_tensor(&mut c)?;
    if c.pos != buf.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes"));
    }
    Ok(t)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&tensor_to_bytes(t))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    tensor_from_bytes(&buf)
}

pub fn paramset_to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, t) in params.iter() {
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        write_tensor_bytes(t, &mut out);
    }
    out
}

pub fn paramset_from_bytes(buf: &[u8]) -> Result<ParamSet> {
    let mut c = Cursor { buf, pos: 0 };
    let count = c.u32()? as usize;
    let mut out = ParamSet::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let plen = c.u16()? as usize;
        let at = c.pos as u64;
        let path = std::str::from_utf8(c.take(plen)?)
            .map_err(|_| Error::format(at, "non-UTF-8 path"))?
            .to_string();
        if let Some(p) = &prev {
            if *p == path {
                return Err(Error::format(at, format!("duplicate path {path}")));
            }
            if *p > path {
                return Err(Error::format(at, "paths out of lexicographic order"));
            }
        }
        let t = read_tensor(&mut c)?;
        prev = Some(path.clone());
        out.insert(path, t);
    }
    if c.pos != buf.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes"));
    }
    Ok(out)
}

pub fn save_paramset(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, paramset_to_bytes(params))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_paramset(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    paramset_from_bytes(&buf)
}

/// 64-bit FNV-1a over a byte stream.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn paramset_checksum(params: &ParamSet) -> u64 {
    fnv1a(&paramset_to_bytes(params))
}
