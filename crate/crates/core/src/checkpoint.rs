//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NCKP" | u16 version | u32 tensor count
//! per tensor: u16 name len | name | u8 dtype | u8 rank | u64 dims.. | data
//! u32 blob count
//! per blob:   u16 name len | name | u64 byte len | bytes
//! ```
//!
//! Entries keep insertion order, so writing the same state twice produces
//! identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"NCKP";
pub const VERSION: u16 = 1;

/// A stored tensor in its on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    /// The tensor converted to `T` (exact when the precision matches).
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointFile {
    tensors: Vec<(String, StoredTensor)>,
    blobs: Vec<(String, Vec<u8>)>,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| corrupt(self.path, "entry name is not UTF-8"))
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let count: usize = shape.iter().product();
        let size = T::DTYPE.size_of();
        let bytes = self.take(count.checked_mul(size).ok_or_else(|| corrupt(self.path, "tensor too large"))?)?;
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(shape, data)
    }
}

impl CheckpointFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a tensor.
    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let stored = StoredTensor::from_tensor(t);
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = stored,
            None => self.tensors.push((name.to_string(), stored)),
        }
    }

    pub fn put_blob(&mut self, name: &str, bytes: Vec<u8>) {
        match self.blobs.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = bytes,
            None => self.blobs.push((name.to_string(), bytes)),
        }
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.put_blob(name, v.to_le_bytes().to_vec());
    }

    pub fn stored(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.stored(name).map(StoredTensor::to)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn get_u64(&self, name: &str) -> Option<u64> {
        self.blob(name)
            .and_then(|b| b.try_into().ok())
            .map(u64::from_le_bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let name = |out: &mut Vec<u8>, n: &str| {
            out.extend_from_slice(&(n.len() as u16).to_le_bytes());
            out.extend_from_slice(n.as_bytes());
        };
        for (n, t) in &self.tensors {
            name(&mut out, n);
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (n, b) in &self.blobs {
            name(&mut out, n);
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        }
        out
    }

    /// Parses file bytes; `path` is only used in error messages.
    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(4).map_err(|_| corrupt(path, "not a checkpoint (bad magic)"))? != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let mut file = CheckpointFile::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| corrupt(path, format!("unknown dtype code {code}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(r.tensor(&shape)?),
                DType::F64 => StoredTensor::F64(r.tensor(&shape)?),
            };
            file.tensors.push((name, t));
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let len = r.u64()? as usize;
            file.blobs.push((name, r.take(len)?.to_vec()));
        }
        if r.pos != buf.len() {
            return Err(corrupt(path, format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
        Self::from_bytes(&buf, path)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = temp_sibling(path);
        let mut f = fs::File::create(&tmp).map_err(|e| corrupt(path, e.to_string()))?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| corrupt(path, e.to_string()))
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
