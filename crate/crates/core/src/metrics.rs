//! Change-mask and elevation metrics, split evaluation and histograms.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::augment::{prepare_eval, prepare_images, resize, resize_mask, Interp};
use crate::autodiff::Tensor;
use crate::data::{DataError, DatasetManifest, DhHistogram, Image, Mask8, RasterF32, Split, Tile};
use crate::exec;
use crate::model::{batch_images, ForwardTrace, Model, ModelError, ParamSet};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("size mismatch: prediction has {pred} pixels, ground truth {gt}")]
    SizeMismatch { pred: usize, gt: usize },
    #[error("split {0} has no tiles")]
    EmptySplit(Split),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Per-pixel class from two-channel scores: the larger channel wins, ties
/// go to no-change.
pub fn binarize_scores(no_change: &[f64], change: &[f64], width: usize, height: usize) -> Mask8 {
    let values = no_change
        .iter()
        .zip(change)
        .map(|(a, b)| u8::from(b > a))
        .collect();
    Mask8 {
        width,
        height,
        values,
    }
}

/// One mask per batch item of an `[N, 2, H, W]` score tensor.
pub fn binarize(m2d: &Tensor) -> Vec<Mask8> {
    let (n, h, w) = (m2d.shape[0], m2d.shape[2], m2d.shape[3]);
    let plane = h * w;
    (0..n)
        .map(|i| {
            let base = i * 2 * plane;
            binarize_scores(
                &m2d.data[base..base + plane],
                &m2d.data[base + plane..base + 2 * plane],
                w,
                h,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &Mask8, gt: &Mask8) -> Result<Self, MetricsError> {
        Self::from_values(&pred.values, &gt.values)
    }

    pub fn from_values(pred: &[u8], gt: &[u8]) -> Result<Self, MetricsError> {
        check_len(pred.len(), gt.len())?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `tp / (tp + fn + fp)`; 1 when there is nothing to detect and nothing
/// was detected.
pub fn iou(c: &Confusion) -> f64 {
    let d = c.tp + c.fn_ + c.fp;
    if d == 0 {
        1.0
    } else {
        c.tp as f64 / d as f64
    }
}

/// `2 tp / (2 tp + fp + fn)`, same empty convention as [`iou`].
pub fn f1(c: &Confusion) -> f64 {
    let d = 2 * c.tp + c.fp + c.fn_;
    if d == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / d as f64
    }
}

fn check_len(pred: usize, gt: usize) -> Result<(), MetricsError> {
    if pred != gt {
        return Err(MetricsError::SizeMismatch { pred, gt });
    }
    Ok(())
}

/// Running sums for RMSE over all pixels and over changed pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ElevationErrors {
    pub sum_sq: f64,
    pub n: u64,
    pub sum_sq_changed: f64,
    pub n_changed: u64,
}

impl ElevationErrors {
    /// `pred` and `gt` in meters. Changed pixels are those with `gt != 0`.
    pub fn from_values(pred: &[f64], gt: &[f64]) -> Result<Self, MetricsError> {
        check_len(pred.len(), gt.len())?;
        let mut e = ElevationErrors::default();
        for (&p, &g) in pred.iter().zip(gt) {
            let sq = (p - g) * (p - g);
            e.sum_sq += sq;
            e.n += 1;
            if g != 0.0 {
                e.sum_sq_changed += sq;
                e.n_changed += 1;
            }
        }
        Ok(e)
    }

    pub fn merge(&mut self, o: &ElevationErrors) {
        self.sum_sq += o.sum_sq;
        self.n += o.n;
        self.sum_sq_changed += o.sum_sq_changed;
        self.n_changed += o.n_changed;
    }

    pub fn rmse(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.sum_sq / self.n as f64).sqrt()
        }
    }

    /// `None` when no pixel changed.
    pub fn crmse(&self) -> Option<f64> {
        (self.n_changed > 0).then(|| (self.sum_sq_changed / self.n_changed as f64).sqrt())
    }
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64, MetricsError> {
    Ok(ElevationErrors::from_values(pred, gt)?.rmse())
}

pub fn crmse(pred: &[f64], gt: &[f64]) -> Result<Option<f64>, MetricsError> {
    Ok(ElevationErrors::from_values(pred, gt)?.crmse())
}

/// Histogram of elevation values, zeros in their own bin.
pub fn histogram(values: &[f64]) -> DhHistogram {
    let mut h = DhHistogram::new();
    h.extend(values.iter().map(|&v| v as f32));
    h
}

/// CSV with columns `bin_left,bin_right,count_gt,count_pred`. The first row
/// is the zero bin (`0,0`); out-of-range counts use infinite edges.
pub fn histogram_csv(gt: &DhHistogram, pred: &DhHistogram) -> String {
    let mut s = String::from("bin_left,bin_right,count_gt,count_pred\n");
    let _ = writeln!(s, "0,0,{},{}", gt.zero, pred.zero);
    let (lo, _) = gt.bin_edges(0);
    let (_, hi) = gt.bin_edges(gt.bins.len() - 1);
    let _ = writeln!(s, "-inf,{lo},{},{}", gt.underflow, pred.underflow);
    for i in 0..gt.bins.len() {
        let (l, r) = gt.bin_edges(i);
        let _ = writeln!(s, "{l},{r},{},{}", gt.bins[i], pred.bins[i]);
    }
    let _ = writeln!(s, "{hi},inf,{},{}", gt.overflow, pred.overflow);
    s
}

/// Prediction and ground truth of one tile at a common resolution, ΔH in
/// meters.
#[derive(Debug, Clone, PartialEq)]
pub struct TileOutcome {
    pub tile_id: String,
    pub pred_mask: Mask8,
    pub pred_dh: Vec<f64>,
    pub gt_mask: Mask8,
    pub gt_dh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileMetrics {
    pub tile_id: String,
    pub f1: f64,
    pub iou: f64,
    pub rmse: f64,
    pub crmse: Option<f64>,
    pub n: u64,
    pub n_c: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub f1: f64,
    pub iou: f64,
    /// Meters.
    pub rmse: f64,
    /// Meters; absent when no pixel changed.
    pub crmse: Option<f64>,
    pub n: u64,
    pub n_c: u64,
    pub confusion: Confusion,
    pub tiles: Vec<TileMetrics>,
}

impl MetricReport {
    /// Micro-averaged report: counts and squared errors are pooled over all
    /// tiles before the ratios are taken.
    pub fn from_outcomes(outcomes: &[TileOutcome]) -> Result<Self, MetricsError> {
        let mut conf = Confusion::default();
        let mut errs = ElevationErrors::default();
        let mut tiles = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            let c = Confusion::from_masks(&o.pred_mask, &o.gt_mask)?;
            let e = ElevationErrors::from_values(&o.pred_dh, &o.gt_dh)?;
            tiles.push(TileMetrics {
                tile_id: o.tile_id.clone(),
                f1: f1(&c),
                iou: iou(&c),
                rmse: e.rmse(),
                crmse: e.crmse(),
                n: e.n,
                n_c: e.n_changed,
            });
            conf.merge(&c);
            errs.merge(&e);
        }
        Ok(Self {
            f1: f1(&conf),
            iou: iou(&conf),
            rmse: errs.rmse(),
            crmse: errs.crmse(),
            n: errs.n,
            n_c: errs.n_changed,
            confusion: conf,
            tiles,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per tile followed by an `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tile_id,f1,iou,rmse,crmse,n,n_c\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for t in &self.tiles {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                t.tile_id,
                t.f1,
                t.iou,
                t.rmse,
                opt(t.crmse),
                t.n,
                t.n_c
            );
        }
        let _ = writeln!(
            s,
            "all,{},{},{},{},{},{}",
            self.f1,
            self.iou,
            self.rmse,
            opt(self.crmse),
            self.n,
            self.n_c
        );
        s
    }
}

/// Report plus ground-truth and predicted ΔH histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub hist_gt: DhHistogram,
    pub hist_pred: DhHistogram,
}

impl Evaluation {
    pub fn from_outcomes(outcomes: &[TileOutcome]) -> Result<Self, MetricsError> {
        let mut hist_gt = DhHistogram::new();
        let mut hist_pred = DhHistogram::new();
        for o in outcomes {
            hist_gt.merge(&histogram(&o.gt_dh));
            hist_pred.merge(&histogram(&o.pred_dh));
        }
        Ok(Self {
            report: MetricReport::from_outcomes(outcomes)?,
            hist_gt,
            hist_pred,
        })
    }

    pub fn histogram_csv(&self) -> String {
        histogram_csv(&self.hist_gt, &self.hist_pred)
    }
}

/// Ground truth resampled to the model's output resolution: nearest
/// neighbour for both the mask and ΔH.
pub fn truth_at(tile: &Tile, size: usize) -> (Mask8, Vec<f64>) {
    truth_from(&tile.mask2d, &tile.delta3d, size)
}

/// Ground truth resampled nearest-neighbour to the model resolution.
pub fn truth_from(mask: &Mask8, delta: &RasterF32, size: usize) -> (Mask8, Vec<f64>) {
    let dh = resize(delta, size, Interp::Nearest)
        .values
        .iter()
        .map(|&v| v as f64)
        .collect();
    (resize_mask(mask, size), dh)
}

/// Model outputs for one image pair at model resolution.
#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub mask: Mask8,
    /// Meters.
    pub dh: RasterF32,
    pub trace: Option<ForwardTrace>,
}

/// Runs the model on a bare image pair.
pub fn predict_images(
    model: &Model,
    params: &ParamSet,
    img1: &Image,
    img2: &Image,
    h_scale: f64,
    trace: bool,
) -> Result<ImagePrediction, MetricsError> {
    let size = model.cfg.input_size;
    let (a, b) = prepare_images(img1, img2, size)?;
    let shape = vec![1, img1.band_count(), size, size];
    let to_tensor = |v: Vec<f32>| Tensor::new(shape.clone(), v.into_iter().map(f64::from).collect());
    let pred = model.predict(params, &to_tensor(a), &to_tensor(b), trace)?;
    let dh = pred.m3d.data.iter().map(|&u| (u * h_scale) as f32).collect();
    Ok(ImagePrediction {
        mask: binarize(&pred.m2d).remove(0),
        dh: RasterF32::new(size, size, dh)?,
        trace: pred.trace,
    })
}

/// Runs the model on one tile and pairs the outputs with its ground truth.
pub fn predict_tile(model: &Model, params: &ParamSet, tile: &Tile, h_scale: f64) -> Result<TileOutcome, MetricsError> {
    let size = model.cfg.input_size;
    let sample = prepare_eval(tile, size, h_scale)?;
    let (x1, x2) = batch_images(&[&sample]);
    let pred = model.predict(params, &x1, &x2, false)?;
    let pred_mask = binarize(&pred.m2d).remove(0);
    let pred_dh = pred.m3d.data.iter().map(|&u| u * h_scale).collect();
    let (gt_mask, gt_dh) = truth_at(tile, size);
    Ok(TileOutcome {
        tile_id: tile.meta.tile_id.clone(),
        pred_mask,
        pred_dh,
        gt_mask,
        gt_dh,
    })
}

/// Evaluates in-memory tiles; per-tile work may run in parallel, results
/// are aggregated in tile order.
pub fn evaluate_tiles(model: &Model, params: &ParamSet, tiles: &[Tile], h_scale: f64) -> Result<Evaluation, MetricsError> {
    let outcomes = exec::map_indexed(tiles.len(), |i| predict_tile(model, params, &tiles[i], h_scale))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Evaluation::from_outcomes(&outcomes)
}

/// Loads and evaluates one split of a dataset, denormalizing with the
/// manifest `h_scale`.
pub fn evaluate_split(
    model: &Model,
    params: &ParamSet,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Evaluation, MetricsError> {
    let tiles = manifest.load_split(split)?;
    if tiles.is_empty() {
        return Err(MetricsError::EmptySplit(split));
    }
    evaluate_tiles(model, params, &tiles, manifest.h_scale)
}
