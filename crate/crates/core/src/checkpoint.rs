//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CSWT" u32 version u32 n_tensors
//!   n × ( u16 name_len, name, u8 rank, rank × u64 dim, f32 data )
//! u64 optimizer_step u32 n_state
//!   n_state × tensor (names "m.<param>" / "v.<param>")
//! u32 config_len, config text (UTF-8)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::train::AdamW;

pub const MAGIC: &[u8; 4] = b"CSWT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: BTreeMap<String, StoredTensor>,
    pub optimizer_step: u64,
    pub optimizer_state: BTreeMap<String, StoredTensor>,
    pub config: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every model parameter must be present with a matching shape.
    Strict,
    /// Load name- and shape-matching tensors, report the rest.
    Intersect,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// In the checkpoint but unused: unknown name or shape mismatch.
    pub skipped: Vec<String>,
    /// In the model but not loaded; these keep their current values.
    pub missing: Vec<String>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(p: &ParamStore<T>, opt: Option<&AdamW>, config: &str) -> Self {
        let params = p
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().iter().map(|v| v.f64() as f32).collect(),
                    },
                )
            })
            .collect();
        let mut state = BTreeMap::new();
        if let Some(opt) = opt {
            for (prefix, moments) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, values) in moments {
                    let shape = p.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|_| vec![values.len()]);
                    state.insert(
                        format!("{prefix}.{name}"),
                        StoredTensor {
                            shape,
                            data: values.iter().map(|&v| v as f32).collect(),
                        },
                    );
                }
            }
        }
        Self {
            params,
            optimizer_step: opt.map_or(0, |o| o.step),
            optimizer_state: state,
            config: config.to_string(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_tensors(&mut out, &self.params)?;
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        write_tensors(&mut out, &self.optimizer_state)?;
        let cfg = self.config.as_bytes();
        out.extend_from_slice(&u32::try_from(cfg.len()).map_err(|_| Error::Format("config too long".into()))?.to_le_bytes());
        out.extend_from_slice(cfg);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let params = read_tensors(&mut r)?;
        let optimizer_step = r.u64()?;
        let optimizer_state = read_tensors(&mut r)?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("config snapshot is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            params,
            optimizer_step,
            optimizer_state,
            config,
        })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Copies tensors into `p`. Validates everything before touching `p`,
    /// so a failed strict load leaves the store unchanged.
    pub fn apply<T: Scalar>(&self, p: &mut ParamStore<T>, mode: LoadMode) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut updates = Vec::new();
        for (name, st) in &self.params {
            match p.get(name) {
                Ok(t) if t.shape() == st.shape.as_slice() => {
                    updates.push((name.clone(), st));
                    report.loaded.push(name.clone());
                }
                Ok(t) if mode == LoadMode::Strict => {
                    return Err(Error::Load(format!(
                        "`{name}`: checkpoint shape {:?}, model shape {:?}",
                        st.shape,
                        t.shape()
                    )))
                }
                _ => report.skipped.push(name.clone()),
            }
        }
        let loaded: BTreeSet<&str> = report.loaded.iter().map(String::as_str).collect();
        report.missing = p.names().filter(|n| !loaded.contains(n)).map(str::to_string).collect();
        if mode == LoadMode::Strict && !report.missing.is_empty() {
            return Err(Error::Load(format!(
                "checkpoint lacks {} parameter(s), first `{}`",
                report.missing.len(),
                report.missing[0]
            )));
        }
        for (name, st) in updates {
            p.insert(
                name,
                Tensor::from_vec(st.data.iter().map(|&v| T::of(v as f64)).collect(), &st.shape)?,
            );
        }
        Ok(report)
    }

    /// Restores optimizer moments for parameters that exist in `p`.
    pub fn restore_optimizer<T: Scalar>(&self, p: &ParamStore<T>, opt: &mut AdamW) {
        opt.step = self.optimizer_step;
        opt.m.clear();
        opt.v.clear();
        for (key, st) in &self.optimizer_state {
            let Some((which, name)) = key.split_once('.') else { continue };
            if !p.contains(name) {
                continue;
            }
            let values = st.data.iter().map(|&v| v as f64).collect();
            match which {
                "m" => opt.m.insert(name.to_string(), values),
                "v" => opt.v.insert(name.to_string(), values),
                _ => None,
            };
        }
    }
}

fn write_tensors(out: &mut Vec<u8>, tensors: &BTreeMap<String, StoredTensor>) -> Result<()> {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(u8::try_from(t.shape.len()).map_err(|_| Error::Format("rank too large".into()))?);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn read_tensors(r: &mut Reader<'_>) -> Result<BTreeMap<String, StoredTensor>> {
    let n = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` truncated")))?;
        let data = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), StoredTensor { shape, data }).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
