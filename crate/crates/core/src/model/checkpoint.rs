//! Binary checkpoints.
//!
//! Layout (all little-endian): magic `ZSCK`, `u32` version, `u64` entry
//! count, then per entry `u32` name length, UTF-8 name, `u32` rank, `u64`
//! extents and a `u64` byte offset into the payload block. The payload block
//! follows the manifest and holds each entry as contiguous `f32` values.
//!
//! Besides the model parameters a file may hold `__meta.step` and the
//! optimizer moments `__adam.m.<name>` / `__adam.v.<name>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{shapes, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ZSCK";
pub const VERSION: u32 = 1;

const STEP_KEY: &str = "__meta.step";
const MOMENT_M: &str = "__adam.m.";
const MOMENT_V: &str = "__adam.v.";

/// Model state plus optional training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// First and second Adam moments, laid out like `params`.
    pub moments: Option<(ModelParams, ModelParams)>,
}

/// Serializes named tensors in checkpoint format.
pub fn encode(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in entries {
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            head.extend_from_slice(&(e as u64).to_le_bytes());
        }
        head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &x in t.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    head.extend_from_slice(&payload);
    head
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("extent overflows usize".into()))
    }
}

/// Parses a checkpoint into named tensors, in file order.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.usize()?;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let offset = r.usize()?;
        manifest.push((name, shape, offset));
    }
    let payload = &buf[r.at..];
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let bytes = offset
            .checked_add(n * 4)
            .filter(|&e| e <= payload.len())
            .map(|e| &payload[offset..e])
            .ok_or_else(|| Error::Checkpoint(format!("payload of {name} out of bounds")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Removes the entries of `want` (under `prefix`) from `table`, checking
/// every shape.
fn extract(table: &mut HashMap<String, Tensor>, want: &ModelParams<Vec<usize>>, prefix: &str) -> Result<ModelParams> {
    let mut first_err = None;
    let out = want.map(|name, shape| {
        let key = format!("{prefix}{name}");
        match table.remove(&key) {
            Some(t) if t.shape() == &shape[..] => t,
            found => {
                first_err.get_or_insert_with(|| match found {
                    Some(t) => Error::Checkpoint(format!("{key} has shape {:?}, config expects {shape:?}", t.shape())),
                    None => Error::Checkpoint(format!("missing entry {key}")),
                });
                Tensor::zeros(shape.clone())
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

impl Checkpoint {
    pub fn untrained(params: ModelParams) -> Self {
        Self {
            params,
            step: 0,
            moments: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Tensor)> = self.params.named();
        let step = Tensor::vector(vec![self.step as f64]);
        entries.push((STEP_KEY.into(), &step));
        if let Some((m, v)) = &self.moments {
            entries.extend(m.named().into_iter().map(|(n, t)| (format!("{MOMENT_M}{n}"), t)));
            entries.extend(v.named().into_iter().map(|(n, t)| (format!("{MOMENT_V}{n}"), t)));
        }
        encode(&entries)
    }

    /// Decodes and validates every model entry against `cfg`.
    pub fn from_bytes(buf: &[u8], cfg: &ModelConfig) -> Result<Self> {
        let mut table: HashMap<String, Tensor> = decode(buf)?.into_iter().collect();
        let want = shapes(cfg);
        let params = extract(&mut table, &want, "")?;
        let moments = if table.keys().any(|k| k.starts_with(MOMENT_M)) {
            Some((
                extract(&mut table, &want, MOMENT_M)?,
                extract(&mut table, &want, MOMENT_V)?,
            ))
        } else {
            None
        };
        let step = match table.remove(STEP_KEY) {
            Some(t) => t.data().first().copied().unwrap_or(0.0) as u64,
            None => 0,
        };
        if let Some(extra) = table.keys().find(|k| !k.starts_with("__")) {
            return Err(Error::Checkpoint(format!("unexpected entry {extra} for this config")));
        }
        Ok(Self { params, step, moments })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, cfg)
    }
}
