use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{OptimizerState, TrainConfig, TrainState};
use crate::model::{ModelConfig, ParamLayout, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTBC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("corrupt checkpoint: checksum {actual:08x}, stored {stored:08x}")]
    Checksum { stored: u32, actual: u32 },
    #[error("checkpoint does not match its model config: {0}")]
    Mismatch(String),
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// ΔH normalization of the training data, meters.
    pub h_scale: f64,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| CheckpointError::Corrupt(format!("{what} length {n}")))
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len(what)?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn blob(&mut self, what: &str) -> Result<&'a [u8], CheckpointError> {
        let n = self.len(what)?;
        self.take(n, what)
    }
}

impl Checkpoint {
    /// Binary layout: magic, version, JSON model and train configs, h_scale,
    /// counters,
    /// then f64 little-endian arrays (parameters, running statistics, Adam
    /// moments), closed by a CRC-32 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.blob(&serde_json::to_vec(&self.model).expect("config serializes"));
        w.blob(&serde_json::to_vec(&self.train).expect("config serializes"));
        w.0.extend_from_slice(&self.h_scale.to_le_bytes());
        let s = &self.state;
        w.u64(s.step);
        w.u64(s.epoch);
        w.u64(s.cursor);
        w.u64(s.epoch_batches);
        w.f64s(&s.epoch_loss);
        w.f64s(&s.params.values);
        w.f64s(&s.params.buffers);
        w.u64(s.opt.step);
        w.f64s(&s.opt.m);
        w.f64s(&s.opt.v);
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(CheckpointError::Corrupt(format!("file is only {} bytes", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(CheckpointError::Checksum { stored, actual });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let mb = r.blob("model config")?;
        let model: ModelConfig = serde_json::from_slice(mb).map_err(|e| CheckpointError::Corrupt(format!("model config: {e}")))?;
        let tb = r.blob("train config")?;
        let train: TrainConfig = serde_json::from_slice(tb).map_err(|e| CheckpointError::Corrupt(format!("train config: {e}")))?;
        let h_scale = f64::from_le_bytes(r.take(8, "h_scale")?.try_into().expect("8 bytes"));
        if !(h_scale > 0.0 && h_scale.is_finite()) {
            return Err(CheckpointError::Corrupt(format!("h_scale {h_scale}")));
        }
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let cursor = r.u64("cursor")?;
        let epoch_batches = r.u64("epoch batches")?;
        let epoch_loss: [f64; 3] = r
            .f64s("epoch loss")?
            .try_into()
            .map_err(|_| CheckpointError::Corrupt("epoch loss must hold 3 values".into()))?;
        let values = r.f64s("parameters")?;
        let buffers = r.f64s("buffers")?;
        let opt_step = r.u64("optimizer step")?;
        let m = r.f64s("first moments")?;
        let v = r.f64s("second moments")?;
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }

        let layout = ParamLayout::new(&model).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        if values.len() != layout.n_params || m.len() != layout.n_params || v.len() != layout.n_params {
            return Err(CheckpointError::Mismatch(format!(
                "{} parameters stored, config needs {}",
                values.len(),
                layout.n_params
            )));
        }
        if buffers.len() != layout.n_buffers {
            return Err(CheckpointError::Mismatch(format!(
                "{} running statistics stored, config needs {}",
                buffers.len(),
                layout.n_buffers
            )));
        }
        Ok(Self {
            model,
            train,
            h_scale,
            state: TrainState {
                params: ParamSet { values, buffers },
                opt: OptimizerState { m, v, step: opt_step },
                step,
                epoch,
                cursor,
                epoch_batches,
                epoch_loss,
            },
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
