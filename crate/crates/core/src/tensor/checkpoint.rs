//! FMV2 named-tensor files.
//!
//! Layout: `b"FMV2"`, version `u16`, then records until end of file:
//! name length `u16`, UTF-8 name, rank `u8`, each dim as `u32`, payload.
//! All integers and floats little-endian. Version 1 stores `f32` payloads,
//! version 2 stores `f64` so parameters survive a round trip bit for bit.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FMV2";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn version(self) -> u16 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn from_version(v: u16) -> Result<Self> {
        match v {
            1 => Ok(Precision::F32),
            2 => Ok(Precision::F64),
            other => Err(Error::Version(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(records: &[NamedArray], precision: Precision) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&precision.version().to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).map_err(too_big)?.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(r.shape.len()).map_err(too_big)?);
        for &d in &r.shape {
            out.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
        }
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(Error::dim("checkpoint", format!("record {} shape/data mismatch", r.name)));
        }
        for &v in &r.data {
            match precision {
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

fn too_big(_: std::num::TryFromIntError) -> Error {
    Error::Contract("checkpoint field exceeds its on-disk width".into())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Truncated {
                what: what.to_string(),
                expected: (self.at + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<(Precision, Vec<NamedArray>)> {
    if buf.len() < 4 || buf[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: MAGIC,
            found: buf[..buf.len().min(4)].to_vec(),
        });
    }
    let mut r = Reader { buf, at: 4 };
    let precision = Precision::from_version(r.u16("checkpoint header")?)?;
    let mut records = Vec::new();
    while r.at < buf.len() {
        let len = r.u16("record name length")? as usize;
        let name = String::from_utf8(r.take(len, "record name")?.to_vec())
            .map_err(|_| Error::Contract("checkpoint record name is not UTF-8".into()))?;
        let rank = r.u8("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("record dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * precision.width(), &format!("payload of {name}"))?;
        let data = match precision {
            Precision::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Precision::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        records.push(NamedArray { name, shape, data });
    }
    Ok((precision, records))
}

pub fn save(path: &Path, records: &[NamedArray], precision: Precision) -> Result<()> {
    let bytes = encode(records, precision)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Precision, Vec<NamedArray>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
