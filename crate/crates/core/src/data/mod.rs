//! Dataset format: rasters, tiles, manifest, validation and the synthetic
//! scene generator.

mod manifest;
mod raster;
mod stats;
mod synth;
mod tile;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{DatasetManifest, Split, MANIFEST_FILE, MANIFEST_VERSION};
pub use raster::{
    decode, read_f32, read_mask, read_raster, write_raster, Mask8, Raster, RasterF32, FLOAT_MAGIC,
    MASK_MAGIC,
};
pub use stats::{split_stats, DhHistogram, SplitStats};
pub use synth::{generate_synthetic, generate_tile, DhInterval, SynthSpec};
pub use tile::{
    read_image, read_tile, validate_tile, write_image, write_tile, Image, Severity, Tile, TileMeta,
    Violation, ViolationKind, DELTA_FILE, DSM_FILES, IMG_FILES, MASK_FILE,
};

/// Optical tile side in pixels.
pub const IMAGE_SIZE: usize = 400;
/// DSM and ΔH side in pixels.
pub const DSM_SIZE: usize = 200;
/// Smallest admissible elevation change, meters.
pub const DH_MIN: f32 = -30.0;
/// Largest admissible elevation change, meters.
pub const DH_MAX: f32 = 35.0;
/// Changes with |ΔH| below this are zeroed in the ground truth.
pub const DH_THRESHOLD: f32 = 1.0;
/// Default normalization constant: the largest |ΔH| in the reference data.
pub const DEFAULT_H_SCALE: f32 = 35.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("truncated raster: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} trailing bytes after raster payload")]
    TrailingBytes { extra: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("mask value {value} at index {index} is not binary")]
    NotBinary { index: usize, value: u8 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("|ΔH| = {value} exceeds h_scale {h_scale}")]
    OutOfRange { value: f64, h_scale: f64 },
    #[error("h_scale must be positive, got {0}")]
    BadScale(f64),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("synthetic generator: {0}")]
    Synth(String),
    #[error("missing tile {0}")]
    MissingTile(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Maps meters to the tanh range by symmetric division.
pub fn normalize_delta(v: f64, h_scale: f64) -> Result<f64, DataError> {
    if h_scale.is_nan() || h_scale <= 0.0 {
        return Err(DataError::BadScale(h_scale));
    }
    if v.abs() > h_scale {
        return Err(DataError::OutOfRange { value: v, h_scale });
    }
    Ok(v / h_scale)
}

/// Inverse of [`normalize_delta`].
pub fn denormalize_delta(u: f64, h_scale: f64) -> Result<f64, DataError> {
    if h_scale.is_nan() || h_scale <= 0.0 {
        return Err(DataError::BadScale(h_scale));
    }
    Ok(u * h_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_delta(0.0, 35.0).unwrap(), 0.0);
        assert_eq!(normalize_delta(35.0, 35.0).unwrap(), 1.0);
        let v = normalize_delta(-30.0, 35.0).unwrap();
        assert!((v - (-0.857_142_857_142_857_1)).abs() < 1e-15);
        assert!(matches!(
            normalize_delta(36.0, 35.0),
            Err(DataError::OutOfRange { .. })
        ));
        assert!(matches!(
            normalize_delta(1.0, 0.0),
            Err(DataError::BadScale(_))
        ));
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(denormalize_delta(1.0, 35.0).unwrap(), 35.0);
        assert_eq!(denormalize_delta(0.0, 35.0).unwrap(), 0.0);
        let u = normalize_delta(17.3, 35.0).unwrap();
        let back = denormalize_delta(u, 35.0).unwrap();
        assert!((back - 17.3).abs() / 17.3 < 1e-6);
    }

    proptest! {
        #[test]
        fn normalize_round_trip(h in 0.5f64..100.0, t in -1.0f64..1.0) {
            let v = t * h;
            let back = denormalize_delta(normalize_delta(v, h).unwrap(), h).unwrap();
            prop_assert!((back - v).abs() <= 1e-6 * v.abs().max(f64::MIN_POSITIVE));
        }
    }
}
