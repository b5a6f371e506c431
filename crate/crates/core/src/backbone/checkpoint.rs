//! Binary checkpoint format.
//!
//! ```text
//! magic       4 bytes  "QMET"
//! version     u32 LE
//! config      u64 LE length + UTF-8 JSON of the BackboneConfig
//! params ver  u64 LE
//! count       u64 LE number of tensors
//! tensor*     u64 name length, name bytes, u64 rank, rank x u64 dims,
//!             prod(dims) x f64 LE values
//! train flag  u8 (0 = none, 1 = present)
//! train state u64 iteration, u64 length + JSON train config,
//!             u64 length + sampler state bytes
//! ```

use std::path::Path;

use super::config::BackboneConfig;
use super::params::ParameterSet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"QMET";
pub const FORMAT_VERSION: u32 = 1;

/// Trainer progress stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub train_config: String,
    pub sampler_state: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: BackboneConfig,
    pub params: ParameterSet<T>,
    pub train_state: Option<TrainState>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.blob(serde_json::to_string(&self.config)?.as_bytes());
        w.u64(self.params.version());
        w.u64(self.params.len() as u64);
        for (name, t) in self.params.iter() {
            w.blob(name.as_bytes());
            w.u64(t.rank() as u64);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.f64(v.as_f64());
            }
        }
        match &self.train_state {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u64(s.iteration);
                w.blob(s.train_config.as_bytes());
                w.blob(&s.sampler_state);
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let config: BackboneConfig = serde_json::from_slice(r.blob()?)?;
        let params_version = r.u64()?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = String::from_utf8(r.blob()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u64()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let data = (0..n)
                .map(|_| r.f64().map(T::lit))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(dims, data)?));
        }
        let params = ParameterSet::from_tensors(&config, tensors, params_version)?;
        let train_state = match r.u8()? {
            0 => None,
            1 => {
                let iteration = r.u64()?;
                let train_config = String::from_utf8(r.blob()?.to_vec())
                    .map_err(|_| Error::Checkpoint("train config is not UTF-8".into()))?;
                let sampler_state = r.blob()?.to_vec();
                Some(TrainState {
                    iteration,
                    train_config,
                    sampler_state,
                })
            }
            f => return Err(Error::Checkpoint(format!("bad train-state flag {f}"))),
        };
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            params,
            train_state,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::from_bytes(&bytes)
}
