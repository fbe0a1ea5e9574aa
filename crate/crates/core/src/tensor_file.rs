//! Named-tensor container used for checkpoints, codebooks and chunk stores.
//!
//! Layout:
//!
//! ```text
//! "DANET1"                  6 bytes magic (format version 1)
//! header_len                u32 little-endian
//! header                    header_len bytes of UTF-8 text
//! payload                   little-endian f32 values
//! ```
//!
//! The header is line oriented. `meta <key> <value>` lines carry free-form
//! metadata (the value runs to the end of the line);
//! `tensor <name> f32 <d0>x<d1>x... <offset>` lines describe each tensor,
//! with `offset` in bytes from the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"DANET1";
const FORMAT: &str = "DANET tensor container";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        format: FORMAT,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<&Self> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "tensor {} has shape {:?}, expected {:?}",
                self.name, self.shape, shape
            )));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format_err(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| format_err(format!("metadata {key}={raw:?} does not parse")))
    }

    /// Stores `data` at 32-bit precision.
    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) -> &mut Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: shape {shape:?} does not match {} values",
            data.len()
        );
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.iter().map(|&x| x as f32).collect(),
        });
        self
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| format_err(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            debug_assert!(!k.contains(char::is_whitespace) && !v.contains('\n'));
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims = t
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            header.push_str(&format!("tensor {} f32 {} {}\n", t.name, dims, offset));
            offset += t.data.len() * 4;
        }
        let mut out = Vec::with_capacity(10 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..5] != b"DANET" {
            return Err(format_err("bad magic bytes"));
        }
        if &bytes[..6] != MAGIC {
            return Err(format_err(format!(
                "unsupported version {:?}, this build reads version 1",
                String::from_utf8_lossy(&bytes[5..6])
            )));
        }
        if bytes.len() < 10 {
            return Err(format_err("truncated before header length"));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let payload_start = 10 + header_len;
        if bytes.len() < payload_start {
            return Err(format_err("truncated header"));
        }
        let header = std::str::from_utf8(&bytes[10..payload_start])
            .map_err(|_| format_err("header is not UTF-8"))?;
        let payload = &bytes[payload_start..];

        let mut file = TensorFile::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in header.lines().enumerate() {
            let bad = |what: &str| format_err(format!("header line {}: {what}", lineno + 1));
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad("malformed"))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    file.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 4 {
                        return Err(bad("tensor entry needs name, dtype, shape, offset"));
                    }
                    if fields[1] != "f32" {
                        return Err(bad(&format!("unsupported dtype {}", fields[1])));
                    }
                    let shape = fields[2]
                        .split('x')
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|_| bad("bad shape"))?;
                    let offset: usize = fields[3].parse().map_err(|_| bad("bad offset"))?;
                    if offset != expected_offset {
                        return Err(bad("tensor offsets are not contiguous"));
                    }
                    let n: usize = shape.iter().product();
                    let end = offset + n * 4;
                    if end > payload.len() {
                        return Err(format_err(format!(
                            "truncated payload: tensor {} needs bytes up to {end}, file has {}",
                            fields[0],
                            payload.len()
                        )));
                    }
                    let data = payload[offset..end]
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    file.tensors.push(Tensor {
                        name: fields[0].to_string(),
                        shape,
                        data,
                    });
                    expected_offset = end;
                }
                other => return Err(bad(&format!("unknown entry kind {other:?}"))),
            }
        }
        if expected_offset != payload.len() {
            return Err(format_err(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { format, msg } => Error::Format {
                format,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }
}
