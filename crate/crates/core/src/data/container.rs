//! Little-endian tensor container.
//!
//! ```text
//! "PMTC" | version u32 | count u32 |
//!   per entry: name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u64* | payload
//! ```
//! dtype codes: 0 = f32, 1 = f64, 2 = u32.

use std::path::Path;

use pmt_tensor::{DType, Float, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PMTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"PMTC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container while reading {0}")]
    Truncated(String),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("entry name is not valid utf-8")]
    BadName,
    #[error("duplicate entry name {0}")]
    DuplicateName(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("entry {name} has dtype {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("missing entry {0}")]
    Missing(String),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl EntryData {
    fn code(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::U32(_) => 2,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            EntryData::F32(_) => "f32",
            EntryData::F64(_) => "f64",
            EntryData::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ContainerError::Truncated(what.to_string())),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], ContainerError> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: EntryData) -> Result<(), ContainerError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ContainerError::DuplicateName(name));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ContainerError::ShapeMismatch {
                name,
                expected: shape.to_vec(),
                found: vec![data.len()],
            });
        }
        self.entries.push(Entry {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: &Tensor<f32>) -> Result<(), ContainerError> {
        self.push(name, t.shape(), EntryData::F32(t.data().to_vec()))
    }

    /// Stores a tensor in its own precision.
    pub fn push_tensor<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<(), ContainerError> {
        let data = match T::DTYPE {
            DType::F32 => EntryData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => EntryData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.push(name, t.shape(), data)
    }

    /// Fetches a tensor stored in precision `T`, checking its shape.
    pub fn tensor<T: Float>(&self, name: &str, expected: &[usize]) -> Result<Tensor<T>, ContainerError> {
        let e = self.require(name)?;
        if e.shape != expected {
            return Err(ContainerError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        let data: Vec<T> = match (&e.data, T::DTYPE) {
            (EntryData::F32(v), DType::F32) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            (EntryData::F64(v), DType::F64) => v.iter().map(|&x| T::lit(x)).collect(),
            (other, want) => {
                return Err(ContainerError::DtypeMismatch {
                    name: name.to_string(),
                    expected: if want == DType::F32 { "f32" } else { "f64" },
                    found: other.dtype_name(),
                })
            }
        };
        Ok(Tensor::new(&e.shape, data).expect("validated length"))
    }

    pub fn push_u32(&mut self, name: impl Into<String>, data: Vec<u32>) -> Result<(), ContainerError> {
        let n = data.len();
        self.push(name, &[n], EntryData::U32(data))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry, ContainerError> {
        self.get(name).ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    /// Fetches an f32 tensor and checks its shape.
    pub fn tensor_f32(&self, name: &str, expected: &[usize]) -> Result<Tensor<f32>, ContainerError> {
        let e = self.require(name)?;
        if e.shape != expected {
            return Err(ContainerError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        match &e.data {
            EntryData::F32(v) => Ok(Tensor::new(&e.shape, v.clone()).expect("validated length")),
            other => Err(ContainerError::DtypeMismatch {
                name: name.to_string(),
                expected: "f32",
                found: other.dtype_name(),
            }),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32], ContainerError> {
        match &self.require(name)?.data {
            EntryData::U32(v) => Ok(v),
            other => Err(ContainerError::DtypeMismatch {
                name: name.to_string(),
                expected: "u32",
                found: other.dtype_name(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.array("magic")?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(r.array("entry count")?);
        let mut c = TensorContainer::new();
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.array(&format!("entry {i} name length"))?) as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("entry {i} name"))?)
                .map_err(|_| ContainerError::BadName)?
                .to_string();
            let [code] = r.array::<1>(&format!("{name} dtype"))?;
            let [ndim] = r.array::<1>(&format!("{name} ndim"))?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(r.array(&format!("{name} dims"))?) as usize);
            }
            let n: usize = shape.iter().product();
            let what = format!("{name} payload");
            let data = match code {
                0 => EntryData::F32(
                    r.take(n * 4, &what)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                1 => EntryData::F64(
                    r.take(n * 8, &what)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                2 => EntryData::U32(
                    r.take(n * 4, &what)?
                        .chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(ContainerError::BadDtype(other)),
            };
            c.push(name, &shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
