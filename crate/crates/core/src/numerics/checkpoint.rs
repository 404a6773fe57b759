//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"POCO0001"
//! u64 (little endian)   header length in bytes
//! header                UTF-8 text, one entry per line:
//!                         meta <key> <value>
//!                         tensor <name> <dim>x<dim>...
//! payload               f32 little endian, tensors in header order
//! ```
//!
//! Parameters are held as `f64` in memory and narrowed to `f32` on save.

use std::collections::BTreeMap;
use std::path::Path;

use super::mlp::MlpSpec;
use super::params::ParamSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"POCO0001";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if key.is_empty() || key.contains(char::is_whitespace) || value.contains('\n') || value.is_empty() {
            return Err(bad(format!("invalid meta entry {key:?} = {value:?}")));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing meta key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| bad(format!("meta key {key:?} has unparsable value {raw:?}")))
    }

    /// Record a network's shape under `prefix`.
    pub fn put_spec(&mut self, prefix: &str, spec: &MlpSpec) -> Result<()> {
        self.set_meta(&format!("{prefix}.input_dim"), spec.input_dim)?;
        let hidden: Vec<String> = spec.hidden_dims.iter().map(usize::to_string).collect();
        self.set_meta(&format!("{prefix}.hidden_dims"), hidden.join(","))?;
        self.set_meta(&format!("{prefix}.output_dim"), spec.output_dim)?;
        self.set_meta(&format!("{prefix}.layer_norm"), spec.use_layer_norm)
    }

    pub fn spec(&self, prefix: &str) -> Result<MlpSpec> {
        let hidden = self
            .meta(&format!("{prefix}.hidden_dims"))?
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| bad(format!("bad hidden dims for {prefix}")))
            })
            .collect::<Result<Vec<_>>>()?;
        MlpSpec::new(
            self.meta_parse(&format!("{prefix}.input_dim"))?,
            &hidden,
            self.meta_parse(&format!("{prefix}.output_dim"))?,
            self.meta_parse(&format!("{prefix}.layer_norm"))?,
        )
    }

    /// Append every tensor of `params`, names prefixed with `prefix.`.
    pub fn put_params(&mut self, prefix: &str, params: &ParamSet) {
        for ((name, shape), data) in params.layout().into_iter().zip(params.tensors()) {
            self.tensors.push(Tensor {
                name: format!("{prefix}.{name}"),
                shape,
                data: data.iter().map(|&x| x as f32).collect(),
            });
        }
    }

    /// Rebuild a parameter set for `spec` from tensors stored under `prefix`.
    pub fn params(&self, prefix: &str, spec: &MlpSpec) -> Result<ParamSet> {
        let mut params = ParamSet::zeros(spec);
        let layout = params.layout();
        for ((name, shape), dst) in layout.into_iter().zip(params.tensors_mut()) {
            let full = format!("{prefix}.{name}");
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| bad(format!("missing tensor {full}")))?;
            if t.shape != shape {
                return Err(bad(format!(
                    "tensor {full} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            dst.iter_mut().zip(&t.data).for_each(|(d, &s)| *d = s as f64);
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            if t.name.contains(char::is_whitespace) {
                return Err(bad(format!("tensor name {:?} contains whitespace", t.name)));
            }
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(bad(format!(
                    "tensor {} holds {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {} {}\n", t.name, dims.join("x")));
        }
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing POCO0001 magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let header = std::str::from_utf8(&bytes[16..header_end]).map_err(|_| bad("header is not UTF-8"))?;

        let mut ckpt = Checkpoint::new();
        let mut shapes = Vec::new();
        for (lineno, line) in header.lines().enumerate() {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), Some(v)) => {
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                (Some("tensor"), Some(name), Some(dims)) => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("header line {}: bad shape {dims:?}", lineno + 1)))?;
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(bad(format!("header line {}: unrecognized entry {line:?}", lineno + 1))),
            }
        }

        let mut offset = header_end;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let end = offset + n * 4;
            if end > bytes.len() {
                return Err(bad(format!("payload truncated in tensor {name}")));
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ckpt.tensors.push(Tensor { name, shape, data });
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes after payload", bytes.len() - offset)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Round every parameter through `f32`, as a save/load cycle would.
pub fn quantize(params: &ParamSet) -> ParamSet {
    params.map(|x| x as f32 as f64)
}
