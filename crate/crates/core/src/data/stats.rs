use serde::Serialize;

use super::manifest::{DatasetManifest, Split};
use super::tile::Tile;
use super::{DataError, DH_MAX, DH_MIN};

/// ΔH histogram with fixed 1 m bins over `[DH_MIN, DH_MAX]`. Exact zeros go
/// to their own bin; values outside the range go to under/overflow, so the
/// counts always partition the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DhHistogram {
    pub zero: u64,
    pub underflow: u64,
    pub overflow: u64,
    pub bins: Vec<u64>,
}

impl Default for DhHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl DhHistogram {
    pub const BIN_WIDTH: f32 = 1.0;

    pub fn new() -> Self {
        let n = ((DH_MAX - DH_MIN) / Self::BIN_WIDTH) as usize;
        Self {
            zero: 0,
            underflow: 0,
            overflow: 0,
            bins: vec![0; n],
        }
    }

    pub fn bin_edges(&self, i: usize) -> (f32, f32) {
        let left = DH_MIN + i as f32 * Self::BIN_WIDTH;
        (left, left + Self::BIN_WIDTH)
    }

    pub fn add(&mut self, v: f32) {
        if v == 0.0 {
            self.zero += 1;
        } else if v < DH_MIN {
            self.underflow += 1;
        } else if v > DH_MAX {
            self.overflow += 1;
        } else {
            let i = ((v - DH_MIN) / Self::BIN_WIDTH).floor() as usize;
            // v == DH_MAX lands in the last bin
            let i = i.min(self.bins.len() - 1);
            self.bins[i] += 1;
        }
    }

    pub fn extend<I: IntoIterator<Item = f32>>(&mut self, values: I) {
        for v in values {
            self.add(v);
        }
    }

    pub fn merge(&mut self, other: &DhHistogram) {
        self.zero += other.zero;
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.zero + self.underflow + self.overflow + self.bins.iter().sum::<u64>()
    }

    pub fn nonzero(&self) -> u64 {
        self.total() - self.zero
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: Split,
    pub tiles: usize,
    pub mask_pixels: u64,
    pub change_pixels: u64,
    /// Percentage of mask pixels labelled as change.
    pub change_pct: f64,
    pub no_change_pct: f64,
    pub histogram: DhHistogram,
}

impl SplitStats {
    pub fn from_tiles(split: Split, tiles: &[Tile]) -> Self {
        let mut mask_pixels = 0u64;
        let mut change_pixels = 0u64;
        let mut histogram = DhHistogram::new();
        for t in tiles {
            mask_pixels += t.mask2d.values.len() as u64;
            change_pixels += t.mask2d.count_ones() as u64;
            histogram.extend(t.delta3d.values.iter().copied().filter(|&v| v != 0.0));
        }
        let change_pct = if mask_pixels == 0 {
            0.0
        } else {
            100.0 * change_pixels as f64 / mask_pixels as f64
        };
        Self {
            split,
            tiles: tiles.len(),
            mask_pixels,
            change_pixels,
            change_pct,
            no_change_pct: if mask_pixels == 0 {
                0.0
            } else {
                100.0 - change_pct
            },
            histogram,
        }
    }
}

/// Per-split change percentages and nonzero-ΔH histograms.
pub fn split_stats(manifest: &DatasetManifest) -> Result<Vec<SplitStats>, DataError> {
    Split::ALL
        .iter()
        .map(|&split| {
            let tiles = manifest.load_split(split)?;
            Ok(SplitStats::from_tiles(split, &tiles))
        })
        .collect()
}
