//! Versioned binary container for model parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BFCK" | u32 version | u32 header_len | header JSON
//! u32 tensor_count
//! per tensor: u16 name_len | name | u8 dtype | u8 ndim | u64 dims[ndim] | raw data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"BFCK";
pub const FORMAT_VERSION: u32 = 1;

/// Version tag of the 14-joint index order stored in every checkpoint.
pub const JOINT_ORDER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// Model family, e.g. `"unimodal"`, `"fusion"`, `"generator"`.
    pub kind: String,
    pub joint_order_version: u32,
    /// Kind-specific configuration and metadata.
    #[serde(default)]
    pub body: serde_json::Value,
}

impl Header {
    pub fn new(kind: impl Into<String>, body: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            joint_order_version: JOINT_ORDER_VERSION,
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Element = f32> {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Checkpoint<T> {
    pub fn from_store(header: Header, store: &ParamStore<T>) -> Self {
        let tensors = store.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { header, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&u32_len(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            let nlen = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&nlen.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("{name}: rank too high")))?;
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.joint_order_version != JOINT_ORDER_VERSION {
            return Err(Error::Checkpoint(format!(
                "joint order version {} is not {JOINT_ORDER_VERSION}",
                header.joint_order_version
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = DType::from_tag(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
            if dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!("{name}: stored as {dtype:?}, expected {:?}", T::DTYPE)));
            }
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dim overflow")))?);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(dtype.size()).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint("section too large".into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
