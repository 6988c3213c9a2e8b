//! Model checkpoints.
//!
//! Layout: the magic line `codesuggest-checkpoint`, one JSON header line
//! (version, run config, model config, vocabulary digest), then a `u32`
//! array count and, per array, `u32` name length, UTF-8 name, `u32` number
//! of dimensions, `u32` dimensions and row-major `f32` values. All integers
//! and floats are little-endian.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::neural::{Model, ModelConfig, NeuralError};
use crate::tensor::{Array, ParamStore};

pub const MAGIC: &str = "codesuggest-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("vocabulary mismatch: checkpoint expects digest {expected}, supplied vocabulary has {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub vocab_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

impl ModelCheckpoint {
    pub fn new(config: RunConfig, model: &Model<f32>, vocab: &Vocabulary) -> Self {
        ModelCheckpoint {
            header: CheckpointHeader {
                version: VERSION,
                config,
                model: model.config,
                vocab_digest: vocab.digest(),
            },
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<Model<f32>, CheckpointError> {
        Ok(Model::from_params(self.header.model, self.params.clone())?)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), CheckpointError> {
        let found = vocab.digest();
        if found != self.header.vocab_digest {
            return Err(CheckpointError::VocabMismatch { expected: self.header.vocab_digest.clone(), found });
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        writeln!(w, "{MAGIC}")?;
        let header = serde_json::to_string(&self.header).map_err(|e| bad(e.to_string()))?;
        writeln!(w, "{header}")?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, arr) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(arr.shape().len() as u32).to_le_bytes())?;
            for &d in arr.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(arr.len() * 4);
            for v in arr.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing version"))?;
        if version != VERSION as u64 {
            return Err(CheckpointError::Version(version as u32));
        }
        let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        let n = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            if len > 1 << 16 {
                return Err(bad("parameter name too long"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated"))?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let nd = read_u32(&mut r)? as usize;
            if nd == 0 || nd > 3 {
                return Err(bad(format!("{name}: {nd} dimensions")));
            }
            let shape: Vec<usize> = (0..nd).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<_, _>>()?;
            let count: usize = shape.iter().product();
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes).map_err(|_| bad("truncated"))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if params.id(&name).is_some() {
                return Err(bad(format!("duplicate array {name}")));
            }
            params.add(&name, Array::new(shape, data).map_err(|e| bad(e.to_string()))?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        let ck = ModelCheckpoint { header, params };
        Model::from_params(ck.header.model, ck.params.clone())?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
