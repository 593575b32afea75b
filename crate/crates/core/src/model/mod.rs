//! The network: shared residual backbone, spatial-attention tokenizer,
//! token encoder, pixel-to-token cross-attention decoder and the 2D/3D
//! prediction heads, with exact gradients through the autodiff tape.

mod config;
mod forward;
mod params;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::augment::ModelSample;
use crate::autodiff::{GradError, Graph, Tensor, Var};
use crate::data::{DataError, RasterF32};

pub use config::{BackboneSpec, DiffMode, FuseMode, ModelConfig, StageSpec, UpsampleMode};
pub use forward::{apply_bn_updates, BnUpdate, ForwardTrace, ForwardVars, Mode, Network, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use params::{
    AttentionParams, BackboneParams, BlockParams, ConvParams, DecoderLayer, EncoderLayer, HeadParams, LnParams,
    MlpParams, NormParams, ParamEntry, ParamId, ParamKind, ParamLayout, ParamSet,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("parameter vector has {actual} values, layout needs {expected}")]
    ParamCount { expected: usize, actual: usize },
    #[error("no forward trace was recorded")]
    MissingTrace,
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Number of learnable scalars for a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize, ModelError> {
    Ok(ParamLayout::new(cfg)?.n_params)
}

/// Value and gradient of the scalar built by `f`, aligned with `params`.
pub fn grad<F>(params: &[f64], f: F) -> Result<(f64, Vec<f64>), ModelError>
where
    F: FnOnce(&mut Graph) -> Result<Var, ModelError>,
{
    let mut g = Graph::new(params);
    let root = f(&mut g)?;
    let value = g.value(root).data[0];
    let grad = g.backward(root)?;
    Ok((value, grad))
}

/// Model outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[N, 2, H, W]`
    pub m2d: Tensor,
    /// `[N, 1, H, W]`
    pub m3d: Tensor,
    pub trace: Option<ForwardTrace>,
}

/// A configuration together with its parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        let layout = ParamLayout::new(&cfg)?;
        Ok(Self { cfg, layout })
    }

    pub fn param_count(&self) -> usize {
        self.layout.n_params
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        self.layout.init(seed)
    }

    pub fn check_params(&self, p: &ParamSet) -> Result<(), ModelError> {
        if p.values.len() != self.layout.n_params {
            return Err(ModelError::ParamCount {
                expected: self.layout.n_params,
                actual: p.values.len(),
            });
        }
        if p.buffers.len() != self.layout.n_buffers {
            return Err(ModelError::ParamCount {
                expected: self.layout.n_buffers,
                actual: p.buffers.len(),
            });
        }
        Ok(())
    }

    pub fn network<'a>(&'a self, buffers: &'a [f64], mode: Mode) -> Network<'a> {
        Network {
            cfg: &self.cfg,
            layout: &self.layout,
            buffers,
            mode,
        }
    }

    /// Inference with running batch-norm statistics.
    pub fn predict(&self, p: &ParamSet, x1: &Tensor, x2: &Tensor, trace: bool) -> Result<Prediction, ModelError> {
        self.check_params(p)?;
        let mut g = Graph::new(&p.values);
        let a = g.input(x1.clone());
        let b = g.input(x2.clone());
        let out = self.network(&p.buffers, Mode::Eval).forward(&mut g, a, b, trace)?;
        Ok(Prediction {
            m2d: g.value(out.m2d).clone(),
            m3d: g.value(out.m3d).clone(),
            trace: out.trace,
        })
    }
}

/// Stacks samples into two `[N, B, H, W]` image tensors.
pub fn batch_images(samples: &[&ModelSample]) -> (Tensor, Tensor) {
    let first = samples[0];
    let shape = vec![samples.len(), first.bands, first.size, first.size];
    let stack = |pick: fn(&ModelSample) -> &[f32]| {
        let data = samples
            .iter()
            .flat_map(|s| pick(s).iter().map(|&v| v as f64))
            .collect();
        Tensor::new(shape.clone(), data)
    };
    (stack(|s| &s.x1), stack(|s| &s.x2))
}

/// Writes each tokenizer attention map of batch item `sample` as an R32F
/// raster under `dir/epoch1` and `dir/epoch2`. Returns the written paths.
pub fn export_attention_maps(
    trace: Option<&ForwardTrace>,
    sample: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>, ModelError> {
    let trace = trace.ok_or(ModelError::MissingTrace)?;
    let mut paths = Vec::new();
    for (e, a) in trace.attention.iter().enumerate() {
        let (l, h, w) = (a.shape[1], a.shape[2], a.shape[3]);
        let sub = dir.join(format!("epoch{}", e + 1));
        std::fs::create_dir_all(&sub).map_err(|err| DataError::io(&sub, err))?;
        for t in 0..l {
            let start = (sample * l + t) * h * w;
            let values = a.data[start..start + h * w].iter().map(|&v| v as f32).collect();
            let path = sub.join(format!("token_{t}.r32"));
            RasterF32::new(w, h, values)?.write(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests;
