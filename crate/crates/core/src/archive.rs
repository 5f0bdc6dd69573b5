//! Tensor archive used for checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"OPTLAB01"
//! u64 header_len, header_len bytes of JSON
//! u64 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dims,
//!             prod(dims) x f64 payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{ArchConfig, OptimizerParams};
use crate::optimus::StepConfig;

const MAGIC: &[u8; 8] = b"OPTLAB01";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }
}

/// JSON header followed by named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(
            32 + header.len()
                + self
                    .tensors
                    .iter()
                    .map(|t| 8 * t.data.len() + 64)
                    .sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` shape {:?} does not match {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not an optlab archive".into()));
        }
        let header_len = read_u64(&mut r)? as usize;
        let header_bytes = take(&mut r, header_len)?;
        let header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is truncated")))?;
            let payload = take(&mut r, 8 * len)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, tensors })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("unexpected end of archive".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Header stored with optimizer weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub arch_config: ArchConfig,
    pub step_config: StepConfig,
    pub seed: u64,
    pub num_params: usize,
}

/// Archive of the weights as one tensor per layout entry.
pub fn params_archive(
    params: &OptimizerParams,
    seed: u64,
    extra: serde_json::Value,
) -> Result<Archive> {
    let header = ParamsHeader {
        arch_config: params.arch.clone(),
        step_config: params.step,
        seed,
        num_params: params.num_params(),
    };
    let mut value = serde_json::to_value(header)?;
    if let (Some(obj), serde_json::Value::Object(more)) = (value.as_object_mut(), extra) {
        obj.extend(more);
    }
    let tensors = params
        .layout()
        .specs()
        .iter()
        .map(|s| Tensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            data: params.values()[s.offset..s.offset + s.len()].to_vec(),
        })
        .collect();
    Ok(Archive {
        header: value,
        tensors,
    })
}

/// Rebuilds weights from an archive, checking every tensor against the
/// layout implied by the stored architecture.
pub fn params_from_archive(archive: &Archive) -> Result<(OptimizerParams, ParamsHeader)> {
    let header: ParamsHeader = serde_json::from_value(archive.header.clone())
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut params = OptimizerParams::zeros(header.arch_config.clone(), header.step_config)
        .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    let specs = params.layout().specs().to_vec();
    for spec in &specs {
        let t = archive.require(&spec.name)?;
        if t.shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, architecture expects {:?}",
                spec.name, t.shape, spec.shape
            )));
        }
        params.values_mut()[spec.offset..spec.offset + spec.len()].copy_from_slice(&t.data);
    }
    Ok((params, header))
}

pub fn save_params(path: &Path, params: &OptimizerParams, seed: u64) -> Result<()> {
    params_archive(params, seed, serde_json::Value::Null)?.save(path)
}

pub fn load_params(path: &Path) -> Result<(OptimizerParams, ParamsHeader)> {
    params_from_archive(&Archive::load(path)?)
}
