//! Shared binary framing of checkpoints and embedding stores.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes
//! version      u32
//! meta_len     u64
//! meta         meta_len bytes of JSON
//! per record:
//!   name_len   u32, then the UTF-8 name
//!   dtype      u8 (0 = f32, 1 = f64)
//!   rank       u32
//!   dims       rank x u64
//!   data       product(dims) little-endian values
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Float};

pub const FORMAT_VERSION: u32 = 1;

/// A named n-dimensional array stored as raw little-endian bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Manifest entry mirrored in the JSON metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
}

impl Record {
    pub fn from_values<T: Float>(name: impl Into<String>, shape: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size());
        values.iter().for_each(|v| v.write_le(&mut bytes));
        Record { name: name.into(), dtype: T::DTYPE, shape: shape.to_vec(), bytes }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Values converted to `T`.
    pub fn values<T: Float>(&self) -> Vec<T> {
        match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        }
    }

    pub fn manifest(&self) -> ManifestEntry {
        ManifestEntry { name: self.name.clone(), dtype: self.dtype.code(), shape: self.shape.clone() }
    }
}

pub fn encode(magic: &[u8; 4], meta: &[u8], records: &[Record]) -> Vec<u8> {
    let payload: usize = records.iter().map(|r| 4 + r.name.len() + 1 + 4 + 8 * r.shape.len() + r.bytes.len()).sum();
    let mut out = Vec::with_capacity(16 + meta.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta);
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype.code());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&r.bytes);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("{}: truncated at byte {} (need {n} more)", self.what, self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::Format(format!("{}: length {v} does not fit in memory", self.what)))
    }
}

/// Splits a container into its JSON metadata and records, checking the
/// magic, the version and that every declared size matches the payload.
pub fn decode<'a>(bytes: &'a [u8], magic: &[u8; 4], what: &'a str) -> Result<(&'a [u8], Vec<Record>)> {
    let mut r = Reader { bytes, pos: 0, what };
    let m = r.take(4)?;
    if m != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{what}: format version {version} is not supported (this build reads version {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u64()?;
    let meta_len = r.len(meta_len)?;
    let meta = r.take(meta_len)?;
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format(format!("{what}: record name is not UTF-8")))?
            .to_string();
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Format(format!("{what}: record {name:?} has unknown dtype code {code}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        let n = shape
            .iter()
            .try_fold(dtype.size(), |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{what}: record {name:?} is too large")))?;
        let data = r.take(n)?.to_vec();
        records.push(Record { name, dtype, shape, bytes: data });
    }
    Ok((meta, records))
}

/// Checks that the metadata manifest lists exactly the on-disk records, in order.
pub fn check_manifest(what: &str, manifest: &[ManifestEntry], records: &[Record]) -> Result<()> {
    if manifest.len() != records.len() {
        return Err(Error::Format(format!(
            "{what}: manifest lists {} records, file holds {}",
            manifest.len(),
            records.len()
        )));
    }
    for (i, (m, r)) in manifest.iter().zip(records).enumerate() {
        if *m != r.manifest() {
            return Err(Error::Format(format!("{what}: record {i} is {:?} but the manifest says {m:?}", r.manifest())));
        }
    }
    Ok(())
}
