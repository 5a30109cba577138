//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TIPC" | version u32 | header_len u64 | header (UTF-8 JSON)
//! | count u64 | count × (path_len u32 | path | rank u32 | dims u64×rank | values f64×numel)
//! | SHA-256 of everything before it (32 bytes)
//! ```
//!
//! The header carries the model and training configuration and the loop
//! state. Optimizer moments are stored as records named `adamw.m/<path>` and
//! `adamw.v/<path>`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use transip_tensor::Array;

use crate::model::{ModelConfig, TransIp};
use crate::train::{OptimizerState, TrainConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TIPC";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "adamw.m/";
const MOMENT_V: &str = "adamw.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    state: LoopState,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopState {
    /// Optimizer updates taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub state: LoopState,
    pub params: Vec<(String, Array)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(
        model: &TransIp,
        train: Option<&TrainConfig>,
        state: LoopState,
        optimizer: Option<&OptimizerState>,
    ) -> Self {
        Self {
            model: model.config().clone(),
            train: train.cloned(),
            state,
            params: model.params().iter().map(|(n, a)| (n.to_string(), a.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model, checking every parameter shape against the stored config.
    pub fn to_model(&self) -> Result<TransIp> {
        TransIp::from_params(self.model.clone(), self.params.clone())
    }

    /// Rebuilds the model under `expected`; mismatches name both shapes.
    pub fn to_model_with(&self, expected: &ModelConfig) -> Result<TransIp> {
        TransIp::from_params(expected.clone(), self.params.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header { model: self.model.clone(), train: self.train.clone(), state: self.state };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut records: Vec<(String, &Array)> = self.params.iter().map(|(n, a)| (n.clone(), a)).collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, arrays) in [(MOMENT_M, &opt.m), (MOMENT_V, &opt.v)] {
                for ((name, _), a) in self.params.iter().zip(arrays) {
                    records.push((format!("{prefix}{name}"), a));
                }
            }
        }
        out.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (name, a) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(err("bad magic bytes (not a TIPC checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| err(format!("malformed header: {e}")))?;
        let count = r.u64()?;
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| err("parameter path is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| err("dimension overflow".into()))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| err("dimension overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let a = Array::new(shape, data)?;
            if let Some(rest) = name.strip_prefix(MOMENT_M) {
                m.push((rest.to_string(), a));
            } else if let Some(rest) = name.strip_prefix(MOMENT_V) {
                v.push((rest.to_string(), a));
            } else {
                params.push((name, a));
            }
        }
        let body_end = r.pos;
        let digest = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(err(format!("{} trailing bytes after digest", bytes.len() - r.pos)));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(err("digest mismatch (file is corrupted)".into()));
        }
        let optimizer = match (m.is_empty(), v.is_empty()) {
            (true, true) => None,
            _ => {
                let names_match = |xs: &[(String, Array)]| {
                    xs.len() == params.len() && xs.iter().zip(&params).all(|(a, b)| a.0 == b.0)
                };
                if !names_match(&m) || !names_match(&v) {
                    return Err(err("optimizer moments do not match the parameter list".into()));
                }
                Some(OptimizerState {
                    step: header.state.step,
                    m: m.into_iter().map(|x| x.1).collect(),
                    v: v.into_iter().map(|x| x.1).collect(),
                })
            }
        };
        Ok(Self { model: header.model, train: header.train, state: header.state, params, optimizer })
    }

    /// Writes via a temporary file and rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp: PathBuf = path.with_extension("tipc.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                msg: format!("truncated at offset {}: needed {n} more bytes, file has {}", self.pos, self.bytes.len()),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
