use std::fs;
use std::path::Path;

use super::raster::{read_f32, read_mask, Mask8, RasterF32};
use super::{DataError, DH_MAX, DH_MIN, DH_THRESHOLD, DSM_SIZE, IMAGE_SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct TileMeta {
    pub tile_id: String,
    /// Meters per image pixel.
    pub gsd_image: f32,
    /// Meters per DSM pixel.
    pub gsd_dsm: f32,
    pub bands: usize,
    pub epoch_1: String,
    pub epoch_2: String,
}

/// Multi-band image, one raster per band, all the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub bands: Vec<RasterF32>,
}

impl Image {
    pub fn new(bands: Vec<RasterF32>) -> Result<Self, DataError> {
        let Some(first) = bands.first() else {
            return Err(DataError::Shape("image needs at least one band".into()));
        };
        let (w, h) = (first.width, first.height);
        if bands.iter().any(|b| b.width != w || b.height != h) {
            return Err(DataError::Shape("image bands differ in size".into()));
        }
        Ok(Self { bands })
    }

    pub fn width(&self) -> usize {
        self.bands.first().map_or(0, |b| b.width)
    }

    pub fn height(&self) -> usize {
        self.bands.first().map_or(0, |b| b.height)
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }
}

/// One dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub meta: TileMeta,
    pub img1: Image,
    pub img2: Image,
    pub dsm1: RasterF32,
    pub dsm2: RasterF32,
    pub mask2d: Mask8,
    pub delta3d: RasterF32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    ImageSize,
    BandCount,
    DsmSize,
    MaskSize,
    DeltaSize,
    GsdRatio,
    NonFinite,
    DeltaRange,
    SubThresholdDelta,
    MaskDeltaMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub severity: Severity,
    pub message: String,
}

impl Violation {
    fn error(kind: ViolationKind, message: String) -> Self {
        Self {
            kind,
            severity: Severity::Error,
            message,
        }
    }
}

/// Checks a tile against the dataset schema. Violations are data, not
/// failures; with `strict == false` mask/ΔH disagreement is only a warning.
pub fn validate_tile(t: &Tile, strict: bool) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Vec::new();

    for (name, img) in [("img1", &t.img1), ("img2", &t.img2)] {
        if img.width() != IMAGE_SIZE || img.height() != IMAGE_SIZE {
            out.push(Violation::error(
                ImageSize,
                format!(
                    "{name} is {}x{}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
                    img.width(),
                    img.height()
                ),
            ));
        }
        if img.band_count() != t.meta.bands || img.band_count() == 0 {
            out.push(Violation::error(
                BandCount,
                format!(
                    "{name} has {} bands, meta says {}",
                    img.band_count(),
                    t.meta.bands
                ),
            ));
        }
    }
    for (name, r) in [("dsm1", &t.dsm1), ("dsm2", &t.dsm2)] {
        if r.width != DSM_SIZE || r.height != DSM_SIZE {
            out.push(Violation::error(
                DsmSize,
                format!("{name} is {}x{}, expected {DSM_SIZE}x{DSM_SIZE}", r.width, r.height),
            ));
        }
    }
    if t.mask2d.width != IMAGE_SIZE || t.mask2d.height != IMAGE_SIZE {
        out.push(Violation::error(
            MaskSize,
            format!("mask2d is {}x{}", t.mask2d.width, t.mask2d.height),
        ));
    }
    if t.delta3d.width != DSM_SIZE || t.delta3d.height != DSM_SIZE {
        out.push(Violation::error(
            DeltaSize,
            format!("delta3d is {}x{}", t.delta3d.width, t.delta3d.height),
        ));
    }
    if (t.meta.gsd_dsm - 2.0 * t.meta.gsd_image).abs() > 1e-6 {
        out.push(Violation::error(
            GsdRatio,
            format!(
                "gsd_dsm {} is not twice gsd_image {}",
                t.meta.gsd_dsm, t.meta.gsd_image
            ),
        ));
    }

    let float_layers = t
        .img1
        .bands
        .iter()
        .chain(&t.img2.bands)
        .map(|b| ("image band", b))
        .chain([("dsm1", &t.dsm1), ("dsm2", &t.dsm2), ("delta3d", &t.delta3d)]);
    for (name, r) in float_layers {
        if let Some(i) = r.first_non_finite() {
            out.push(Violation::error(
                NonFinite,
                format!("{name} has a non-finite value at {i}"),
            ));
        }
    }

    if let Some(v) = t
        .delta3d
        .values
        .iter()
        .find(|v| v.is_finite() && (**v < DH_MIN || **v > DH_MAX))
    {
        out.push(Violation::error(
            DeltaRange,
            format!("ΔH {v} outside [{DH_MIN}, {DH_MAX}]"),
        ));
    }
    if let Some(v) = t
        .delta3d
        .values
        .iter()
        .find(|v| **v != 0.0 && v.abs() < DH_THRESHOLD)
    {
        out.push(Violation::error(
            SubThresholdDelta,
            format!("sub-threshold ΔH {v} (|ΔH| < {DH_THRESHOLD} m must be zero)"),
        ));
    }

    let sizes_ok = t.mask2d.width == 2 * t.delta3d.width && t.mask2d.height == 2 * t.delta3d.height;
    if sizes_ok {
        let mut mismatches = 0usize;
        for y in 0..t.delta3d.height {
            for x in 0..t.delta3d.width {
                let changed = t.delta3d.get(x, y) != 0.0;
                let any = (0..2).any(|dy| (0..2).any(|dx| t.mask2d.get(2 * x + dx, 2 * y + dy) == 1));
                if any != changed {
                    mismatches += 1;
                }
            }
        }
        if mismatches > 0 {
            out.push(Violation {
                kind: MaskDeltaMismatch,
                severity: if strict {
                    Severity::Error
                } else {
                    Severity::Warning
                },
                message: format!("{mismatches} ΔH pixels disagree with their 2x2 mask block"),
            });
        }
    }
    out
}

/// File names inside a tile directory.
pub const IMG_FILES: [&str; 2] = ["t1.img", "t2.img"];
pub const DSM_FILES: [&str; 2] = ["dsm1.r32", "dsm2.r32"];
pub const MASK_FILE: &str = "mask2d.msk";
pub const DELTA_FILE: &str = "delta3d.r32";

/// `.img` layout: one byte band count, then that many R32F rasters.
pub fn write_image(img: &Image, path: &Path) -> Result<(), DataError> {
    if img.bands.is_empty() || img.bands.len() > u8::MAX as usize {
        return Err(DataError::Shape(format!(
            "band count {} not encodable",
            img.bands.len()
        )));
    }
    let mut bytes = vec![img.bands.len() as u8];
    for b in &img.bands {
        bytes.extend(b.to_bytes()?);
    }
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let Some((&count, mut rest)) = bytes.split_first() else {
        return Err(DataError::Truncated {
            expected: 1,
            actual: 0,
        });
    };
    let mut bands = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (r, used) = RasterF32::from_bytes(rest)?;
        bands.push(r);
        rest = &rest[used..];
    }
    if !rest.is_empty() {
        return Err(DataError::TrailingBytes { extra: rest.len() });
    }
    Image::new(bands)
}

pub fn write_tile(root: &Path, t: &Tile) -> Result<(), DataError> {
    let dir = root.join(&t.meta.tile_id);
    fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
    write_image(&t.img1, &dir.join(IMG_FILES[0]))?;
    write_image(&t.img2, &dir.join(IMG_FILES[1]))?;
    t.dsm1.write(&dir.join(DSM_FILES[0]))?;
    t.dsm2.write(&dir.join(DSM_FILES[1]))?;
    t.mask2d.write(&dir.join(MASK_FILE))?;
    t.delta3d.write(&dir.join(DELTA_FILE))?;
    Ok(())
}

/// Loads `<root>/<tile_id>/`. Shared metadata (GSD, epochs) comes from the
/// caller, usually the manifest.
pub fn read_tile(root: &Path, tile_id: &str, template: &TileMeta) -> Result<Tile, DataError> {
    let dir = root.join(tile_id);
    if !dir.is_dir() {
        return Err(DataError::MissingTile(tile_id.to_string()));
    }
    let img1 = read_image(&dir.join(IMG_FILES[0]))?;
    let img2 = read_image(&dir.join(IMG_FILES[1]))?;
    let meta = TileMeta {
        tile_id: tile_id.to_string(),
        bands: img1.band_count(),
        ..template.clone()
    };
    Ok(Tile {
        meta,
        img1,
        img2,
        dsm1: read_f32(&dir.join(DSM_FILES[0]))?,
        dsm2: read_f32(&dir.join(DSM_FILES[1]))?,
        mask2d: read_mask(&dir.join(MASK_FILE))?,
        delta3d: read_f32(&dir.join(DELTA_FILE))?,
    })
}
