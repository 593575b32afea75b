use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{save_checkpoint, train_step, Checkpoint, LossBreakdown, OptimizerState, TrainConfig, TrainError};
use crate::augment::{augment, sample_rng};
use crate::data::{DatasetManifest, Split, Tile};
use crate::exec;
use crate::metrics::evaluate_tiles;
use crate::model::{Model, ModelConfig, ParamSet};

pub const LOG_HEADER: &str = "epoch,l2d,l3d,total,F1,IoU,RMSE,cRMSE";

/// One line of the metric log: mean training losses of an epoch and the
/// validation metrics after it. Metrics are absent without validation tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: u64,
    pub l2d: f64,
    pub l3d: f64,
    pub total: f64,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub rmse: Option<f64>,
    pub crmse: Option<f64>,
}

impl LogRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.l2d,
            self.l3d,
            self.total,
            opt(self.f1),
            opt(self.iou),
            opt(self.rmse),
            opt(self.crmse)
        );
        s
    }
}

/// Mutable training state; together with the configs it fully determines
/// the rest of the run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub opt: OptimizerState,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches already consumed in the current epoch.
    pub cursor: u64,
    pub epoch_batches: u64,
    /// Running sums of total, l2d, l3d over the current epoch.
    pub epoch_loss: [f64; 3],
}

pub struct Trainer {
    pub model: Model,
    pub tc: TrainConfig,
    pub h_scale: f64,
    pub state: TrainState,
    /// Periodic checkpoints go here when set.
    pub checkpoint_dir: Option<PathBuf>,
    train: Vec<Tile>,
    val: Vec<Tile>,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, tc: TrainConfig, train: Vec<Tile>, val: Vec<Tile>, h_scale: f64) -> Result<Self, TrainError> {
        let model = Model::new(cfg)?;
        let params = model.init(tc.seed);
        let state = TrainState {
            opt: OptimizerState::new(params.values.len()),
            params,
            step: 0,
            epoch: 0,
            cursor: 0,
            epoch_batches: 0,
            epoch_loss: [0.0; 3],
        };
        Self::with_state(model, tc, state, train, val, h_scale)
    }

    pub fn from_manifest(manifest: &DatasetManifest, cfg: ModelConfig, tc: TrainConfig) -> Result<Self, TrainError> {
        let train = manifest.load_split(Split::Train)?;
        let val = manifest.load_split(Split::Val)?;
        Self::new(cfg, tc, train, val, manifest.h_scale)
    }

    /// Continues a run from a checkpoint.
    pub fn resume(ckpt: Checkpoint, train: Vec<Tile>, val: Vec<Tile>) -> Result<Self, TrainError> {
        let model = Model::new(ckpt.model)?;
        Self::with_state(model, ckpt.train, ckpt.state, train, val, ckpt.h_scale)
    }

    fn with_state(
        model: Model,
        tc: TrainConfig,
        state: TrainState,
        train: Vec<Tile>,
        val: Vec<Tile>,
        h_scale: f64,
    ) -> Result<Self, TrainError> {
        tc.validate()?;
        model.check_params(&state.params)?;
        if tc.augment.target_size != model.cfg.input_size {
            return Err(TrainError::InvalidConfig(format!(
                "augment.target_size {} differs from model input_size {}",
                tc.augment.target_size, model.cfg.input_size
            )));
        }
        if train.is_empty() {
            return Err(TrainError::NoTrainTiles);
        }
        Ok(Self {
            model,
            tc,
            h_scale,
            state,
            checkpoint_dir: None,
            train,
            val,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            train: self.tc.clone(),
            h_scale: self.h_scale,
            state: self.state.clone(),
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.tc.batch_size) as u64
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.tc.epochs || self.tc.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Shuffled train-tile order of an epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.tc.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step. Returns the log row when the step completes an
    /// epoch.
    pub fn step(&mut self) -> Result<(LossBreakdown, Option<LogRow>), TrainError> {
        let s = &self.state;
        let order = self.epoch_order(s.epoch);
        let bs = self.tc.batch_size;
        let start = s.cursor as usize * bs;
        let idx = &order[start..(start + bs).min(order.len())];
        let seed = self.tc.seed ^ self.tc.augment.seed;
        let epoch = s.epoch;
        let samples = exec::map_indexed(idx.len(), |i| {
            let ti = idx[i];
            let mut rng = sample_rng(seed, epoch, ti as u64);
            augment(&self.train[ti], &self.tc.augment, self.h_scale, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<_> = samples.iter().collect();

        let st = &mut self.state;
        let lb = train_step(&self.model, &mut st.params, &mut st.opt, &refs, &self.tc)?;
        st.step += 1;
        st.cursor += 1;
        st.epoch_batches += 1;
        st.epoch_loss[0] += lb.total;
        st.epoch_loss[1] += lb.l2d;
        st.epoch_loss[2] += lb.l3d;

        if st.cursor < self.steps_per_epoch() {
            return Ok((lb, None));
        }
        let row = self.finish_epoch()?;
        Ok((lb, Some(row)))
    }

    fn finish_epoch(&mut self) -> Result<LogRow, TrainError> {
        let st = &mut self.state;
        let n = st.epoch_batches.max(1) as f64;
        let mut row = LogRow {
            epoch: st.epoch + 1,
            total: st.epoch_loss[0] / n,
            l2d: st.epoch_loss[1] / n,
            l3d: st.epoch_loss[2] / n,
            f1: None,
            iou: None,
            rmse: None,
            crmse: None,
        };
        st.epoch += 1;
        st.cursor = 0;
        st.epoch_batches = 0;
        st.epoch_loss = [0.0; 3];
        if !self.val.is_empty() {
            let ev = evaluate_tiles(&self.model, &self.state.params, &self.val, self.h_scale)?;
            row.f1 = Some(ev.report.f1);
            row.iou = Some(ev.report.iou);
            row.rmse = Some(ev.report.rmse);
            row.crmse = ev.report.crmse;
        }
        let every = self.tc.checkpoint_every;
        if let Some(dir) = &self.checkpoint_dir {
            if every > 0 && self.state.epoch.is_multiple_of(every) {
                let path = dir.join(format!("epoch_{:04}.ckpt", self.state.epoch));
                save_checkpoint(&self.checkpoint(), &path)?;
            }
        }
        Ok(row)
    }

    /// Trains until the epoch or step budget is exhausted, calling
    /// `on_epoch` after every completed epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&LogRow)) -> Result<Vec<LogRow>, TrainError> {
        let mut log = Vec::new();
        while !self.finished() {
            if let (_, Some(row)) = self.step()? {
                on_epoch(&row);
                log.push(row);
            }
        }
        Ok(log)
    }

    /// At most `n` more steps, respecting the budget.
    pub fn run_steps(&mut self, n: u64) -> Result<Vec<LogRow>, TrainError> {
        let mut log = Vec::new();
        for _ in 0..n {
            if self.finished() {
                break;
            }
            if let (_, Some(row)) = self.step()? {
                log.push(row);
            }
        }
        Ok(log)
    }

    pub fn train_tiles(&self) -> &[Tile] {
        &self.train
    }

    pub fn val_tiles(&self) -> &[Tile] {
        &self.val
    }
}

/// Metric log as CSV text.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}
