//! Versioned checkpoint container.
//!
//! ```text
//! "FPCK" | u32 version | u32 header length | header JSON
//! then, per tensor in header order: u64 blob length | FPT1 blob
//! ```
//!
//! The header records the model kind, its configuration, the training step
//! and the tensor names. Optimizer moments are stored as `adam.m.<name>` and
//! `adam.v.<name>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpt;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::NdTensor;

const MAGIC: &[u8; 4] = b"FPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    step: u64,
    names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model kind, e.g. `"codec"` or `"denoiser"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<(String, NdTensor)>,
}

impl Checkpoint {
    /// Snapshot of a parameter store and, optionally, its optimizer state.
    pub fn capture(
        kind: &str,
        config: serde_json::Value,
        store: &ParamStore,
        adam: Option<&Adam>,
    ) -> Self {
        let mut tensors: Vec<(String, NdTensor)> = store
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.tensor.clone()))
            .collect();
        let mut step = 0;
        if let Some(adam) = adam {
            step = adam.step;
            for ((_, p), m) in store.iter().zip(&adam.m) {
                tensors.push((format!("adam.m.{}", p.name()), m.clone()));
            }
            for ((_, p), v) in store.iter().zip(&adam.v) {
                tensors.push((format!("adam.v.{}", p.name()), v.clone()));
            }
        }
        Self {
            kind: kind.to_string(),
            config,
            step,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NdTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "checkpoint holds a {}, expected a {kind}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Copies every parameter of `store` from the checkpoint.
    pub fn restore_params(&self, kind: &str, store: &mut ParamStore) -> Result<()> {
        self.expect_kind(kind)?;
        let names: Vec<String> = store.iter().map(|(_, p)| p.name().to_string()).collect();
        for name in names {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            store.assign(&name, t.clone())?;
        }
        Ok(())
    }

    /// Restores optimizer moments and step.
    pub fn restore_adam(&self, store: &ParamStore, adam: &mut Adam) -> Result<()> {
        for (i, (_, p)) in store.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut adam.m[i]), ("adam.v.", &mut adam.v[i])] {
                let name = format!("{prefix}{}", p.name());
                let t = self
                    .get(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        adam.step = self.step;
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            let blob = fpt::to_bytes(t);
            w.write_all(&(blob.len() as u64).to_le_bytes())?;
            w.write_all(&blob)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        r.read_exact(&mut word)?;
        let len = u32::from_le_bytes(word);
        if len > MAX_HEADER {
            return Err(Error::Format(format!("checkpoint header of {len} bytes")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.names.len());
        for name in header.names {
            let mut len = [0u8; 8];
            r.read_exact(&mut len)?;
            let mut blob = vec![0u8; u64::from_le_bytes(len) as usize];
            r.read_exact(&mut blob)?;
            tensors.push((name, fpt::from_bytes(&blob)?));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            step: header.step,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}
