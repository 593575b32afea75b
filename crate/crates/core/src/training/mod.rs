//! Multitask loss, AdamW, the epoch loop and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugSpec, ModelSample};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::model::{apply_bn_updates, batch_images, Model, ModelError, Mode, ParamSet};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    gradcheck, gradcheck_sample, param_name, GradcheckReport, FD_STEP, GRADCHECK_FLOOR, GRADCHECK_TOL, REFINE_STEPS,
};
pub use optim::OptimizerState;
pub use trainer::{log_csv, LogRow, TrainState, Trainer, LOG_HEADER};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {term} loss")]
    NonFiniteLoss { term: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("train split is empty")]
    NoTrainTiles,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the 2D loss.
    pub alpha: f64,
    /// Weight of the 3D loss.
    pub beta: f64,
    pub w_nochange: f64,
    pub w_change: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<u64>,
    pub augment: AugSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 3.0,
            w_nochange: 0.05,
            w_change: 0.95,
            lr: 1e-4,
            batch_size: 15,
            epochs: 300,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 10,
            max_steps: None,
            augment: AugSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Small-machine overrides: larger step size, full-batch on a handful of
    /// tiles, a step budget, no augmentation.
    pub fn desk(input_size: usize) -> Self {
        Self {
            lr: 5e-3,
            batch_size: 8,
            epochs: 500,
            checkpoint_every: 0,
            max_steps: Some(500),
            augment: AugSpec::resize_only(input_size),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad(format!("alpha and beta must be finite and >= 0, got {} and {}", self.alpha, self.beta));
        }
        for (name, w) in [("w_nochange", self.w_nochange), ("w_change", self.w_change)] {
            if !(w > 0.0 && w < 1.0) {
                return bad(format!("{name} must be in (0,1), got {w}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0,1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        self.augment.validate().map_err(TrainError::InvalidConfig)
    }
}

/// Loss terms of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l2d: f64,
    pub l3d: f64,
}

pub const BCE_EPS: f64 = 1e-7;

/// Loss nodes on a graph.
pub struct LossVars {
    pub total: Var,
    pub l2d: Var,
    pub l3d: Var,
}

/// Class-weighted BCE on the two sigmoid channels plus MSE on the
/// normalized elevation, combined as `alpha * l2d + beta * l3d`.
pub fn loss_vars(g: &mut Graph, m2d: Var, m3d: Var, y2d: &[u8], y3d: &[f64], tc: &TrainConfig) -> LossVars {
    let l2d = g.weighted_bce(m2d, y2d, [tc.w_nochange, tc.w_change], BCE_EPS);
    let l3d = g.mse(m3d, y3d);
    let a = g.scale(l2d, tc.alpha);
    let b = g.scale(l3d, tc.beta);
    let total = g.add(a, b);
    LossVars { total, l2d, l3d }
}

fn breakdown(g: &Graph, v: &LossVars) -> Result<LossBreakdown, TrainError> {
    let get = |x: Var| g.value(x).data[0];
    let out = LossBreakdown {
        total: get(v.total),
        l2d: get(v.l2d),
        l3d: get(v.l3d),
    };
    for (term, x) in [("l2d", out.l2d), ("l3d", out.l3d), ("total", out.total)] {
        if !x.is_finite() {
            return Err(TrainError::NonFiniteLoss { term });
        }
    }
    Ok(out)
}

/// Loss of fixed predictions: `m2d [N,2,H,W]`, `m3d [N,1,H,W]`, targets
/// flattened in the same pixel order.
pub fn loss(m2d: &Tensor, m3d: &Tensor, y2d: &[u8], y3d: &[f64], tc: &TrainConfig) -> Result<LossBreakdown, TrainError> {
    let mut g = Graph::new(&[]);
    let a = g.input(m2d.clone());
    let b = g.input(m3d.clone());
    let v = loss_vars(&mut g, a, b, y2d, y3d, tc);
    breakdown(&g, &v)
}

/// Targets of a batch, concatenated in sample order.
pub fn batch_targets(samples: &[&ModelSample]) -> (Vec<u8>, Vec<f64>) {
    let y2d = samples.iter().flat_map(|s| s.y2d.iter().copied()).collect();
    let y3d = samples.iter().flat_map(|s| s.y3d.iter().map(|&v| v as f64)).collect();
    (y2d, y3d)
}

/// Loss and gradient of one batch with batch-norm in train mode. Returns the
/// running-statistic updates without applying them.
pub fn batch_gradient(
    model: &Model,
    params: &ParamSet,
    samples: &[&ModelSample],
    tc: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>, Vec<crate::model::BnUpdate>), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    model.check_params(params)?;
    let (x1, x2) = batch_images(samples);
    let (y2d, y3d) = batch_targets(samples);
    let mut g = Graph::new(&params.values);
    let a = g.input(x1);
    let b = g.input(x2);
    let out = model.network(&params.buffers, Mode::Train).forward(&mut g, a, b, false)?;
    let lv = loss_vars(&mut g, out.m2d, out.m3d, &y2d, &y3d, tc);
    let lb = breakdown(&g, &lv)?;
    let grad = g.backward(lv.total).map_err(ModelError::from)?;
    Ok((lb, grad, out.bn_updates))
}

/// One AdamW update on a batch; also advances the batch-norm running
/// statistics.
pub fn train_step(
    model: &Model,
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    samples: &[&ModelSample],
    tc: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let (lb, grad, updates) = batch_gradient(model, params, samples, tc)?;
    apply_bn_updates(&mut params.buffers, &updates);
    opt.update(&mut params.values, &grad, &model.layout.decay_mask(), tc);
    Ok(lb)
}
