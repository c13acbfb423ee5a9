//! Single-file container of named arrays plus JSON metadata.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON
//! header (dtype, metadata, entry table), then raw little-endian scalar
//! data. Round-trips are bit-exact, which checkpoint resume relies on.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"GALIGNC1";
pub const FORMAT_VERSION: u32 = 1;

/// Byte-level codec for container payloads; implemented for the two
/// scalar types the crate supports.
pub trait LeBytes: Sized {
    const WIDTH: usize;
    const DTYPE: &'static str;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(buf: &[u8]) -> Self;
}

impl LeBytes for f32 {
    const WIDTH: usize = 4;
    const DTYPE: &'static str = "f32";
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(buf: &[u8]) -> Self {
        f32::from_le_bytes(buf[..4].try_into().unwrap())
    }
}

impl LeBytes for f64 {
    const WIDTH: usize = 8;
    const DTYPE: &'static str = "f64";
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(buf: &[u8]) -> Self {
        f64::from_le_bytes(buf[..8].try_into().unwrap())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryDesc {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    meta: serde_json::Value,
    entries: Vec<EntryDesc>,
}

/// Named arrays plus free-form JSON metadata.
#[derive(Debug, Clone)]
pub struct Container<T: Scalar + LeBytes> {
    pub meta: serde_json::Value,
    pub arrays: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar + LeBytes> Container<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            arrays: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, arr: ArrayD<T>) {
        self.arrays.insert(name.into(), arr);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    /// Serialize to bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, arr) in &self.arrays {
            let offset = data.len() as u64;
            for &v in arr.iter() {
                v.write_le(&mut data);
            }
            entries.push(EntryDesc {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset,
                len: arr.len() as u64,
            });
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            entries,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + 4 + 8 + header_bytes.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a container file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + header_len {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "dtype mismatch: file holds {}, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let data = &bytes[20 + header_len..];
        let mut arrays = IndexMap::with_capacity(header.entries.len());
        for e in &header.entries {
            let byte_start = e.offset as usize;
            let byte_len = e.len as usize * T::WIDTH;
            if byte_start + byte_len > data.len() {
                return Err(fail("truncated data section"));
            }
            let mut values = Vec::with_capacity(e.len as usize);
            for i in 0..e.len as usize {
                values.push(T::read_le(&data[byte_start + i * T::WIDTH..]));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .map_err(|err| Error::Checkpoint(format!("bad shape for `{}`: {err}", e.name)))?;
            arrays.insert(e.name.clone(), arr);
        }
        Ok(Container {
            meta: header.meta,
            arrays,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "container".into())
        ));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
