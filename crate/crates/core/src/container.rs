//! Single-file tensor container shared by datasets, checkpoints and samples.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes   "VDTC"
//! version   u16       currently 1
//! count     u32       number of tensors
//! entries   count ×   name_len u16, name (UTF-8), dtype u8, rank u8, dims u64 × rank
//! payloads  count ×   raw little-endian elements, in entry order
//! mlen      u64       manifest length in bytes
//! manifest  mlen      UTF-8 TOML text
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VDTC";
pub const VERSION: u16 = 1;

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub manifest: String,
}

impl Container {
    pub fn new(manifest: impl Into<String>) -> Self {
        Self {
            tensors: Vec::new(),
            manifest: manifest.into(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("container has no tensor named `{name}`")))
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Contract(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(dtype_code(t.dtype())?);
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            match t.dtype() {
                DType::F32 => {
                    for v in t.flatten_all()?.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F64 => {
                    for v in t.flatten_all()?.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                other => return Err(Error::Contract(format!("unsupported dtype {other:?}"))),
            }
        }
        let manifest = self.manifest.as_bytes();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(cur.error_at(0, format!("bad magic {magic:?}")));
        }
        let version = cur.u16("version")?;
        if version != VERSION {
            return Err(cur.error_at(4, format!("unsupported version {version}")));
        }
        let count = cur.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = cur.u16("name length")? as usize;
            let name_at = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len, "name")?)
                .map_err(|_| cur.error_at(name_at, "tensor name is not UTF-8"))?
                .to_string();
            let dtype_at = cur.pos;
            let dtype = match cur.u8("dtype")? {
                0 => DType::F32,
                1 => DType::F64,
                code => return Err(cur.error_at(dtype_at, format!("unknown dtype code {code}"))),
            };
            let rank = cur.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u64("dim")? as usize);
            }
            entries.push((name, dtype, dims));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, dtype, dims) in entries {
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| cur.error_here(format!("shape of `{name}` overflows")))?;
            let width = dtype.size_in_bytes();
            let len = numel
                .checked_mul(width)
                .ok_or_else(|| cur.error_here(format!("payload of `{name}` overflows")))?;
            let raw = cur.take(len, "tensor payload")?;
            let tensor = match dtype {
                DType::F32 => {
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                _ => {
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                        .collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
            };
            tensors.push((name, tensor));
        }
        let mlen = cur.u64("manifest length")? as usize;
        let manifest_at = cur.pos;
        let manifest = std::str::from_utf8(cur.take(mlen, "manifest")?)
            .map_err(|_| cur.error_at(manifest_at, "manifest is not UTF-8"))?
            .to_string();
        if cur.pos != bytes.len() {
            return Err(cur.error_here(format!(
                "{} trailing bytes after manifest",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { tensors, manifest })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Contract(format!("unsupported dtype {other:?}"))),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_here(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn error_here(&self, msg: impl Into<String>) -> Error {
        self.error_at(self.pos, msg)
    }

    fn error_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            msg: msg.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("kind = \"test\"\n");
        c.push(
            "a",
            Tensor::from_vec(vec![1f32, -2.5, 3.25, 0.0, 7.0, 8.0], (2, 3), &Device::Cpu).unwrap(),
        );
        c.push("b", Tensor::from_vec(vec![1e-300f64, 2.0], 2, &Device::Cpu).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let d = Container::decode(&bytes).unwrap();
        assert_eq!(d.manifest, c.manifest);
        assert_eq!(d.tensors.len(), 2);
        assert_eq!(d.get("a").unwrap().dims(), &[2, 3]);
        assert_eq!(
            d.get("a").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1f32, -2.5, 3.25, 0.0, 7.0, 8.0]
        );
        assert_eq!(d.get("b").unwrap().to_vec1::<f64>().unwrap(), vec![1e-300, 2.0]);
        assert_eq!(d.encode().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = sample().encode().unwrap();
        bytes[0] = b'X';
        match Container::decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_dtype_reports_its_offset() {
        let mut bytes = sample().encode().unwrap();
        // magic(4) + version(2) + count(4) + name_len(2) + "a"(1)
        bytes[13] = 9;
        match Container::decode(&bytes) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 13);
                assert!(msg.contains("dtype"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().encode().unwrap();
        for cut in [3, 11, 30, bytes.len() - 1] {
            assert!(matches!(
                Container::decode(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Container::decode(&extra), Err(Error::Format { .. })));
    }
}
