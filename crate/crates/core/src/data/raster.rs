//! Headered little-endian raster files.
//!
//! Layout: 4 magic bytes (`R32F` or `MSK8`), width and height as `u32` LE,
//! then the row-major payload (`f32` LE, or one byte per mask value).

use std::fs;
use std::path::Path;

use super::DataError;

pub const FLOAT_MAGIC: [u8; 4] = *b"R32F";
pub const MASK_MAGIC: [u8; 4] = *b"MSK8";
const HEADER_LEN: usize = 12;

/// Single-channel float grid (meters for DSM/ΔH, reflectance for bands).
#[derive(Debug, Clone, PartialEq)]
pub struct RasterF32 {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

/// Binary grid, every value 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask8 {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

/// Either kind of raster, as returned by [`read_raster`].
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    Float(RasterF32),
    Mask(Mask8),
}

impl RasterF32 {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self, DataError> {
        if values.len() != width * height {
            return Err(DataError::Shape(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.values[y * self.width + x] = v;
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    pub fn mean(&self) -> f32 {
        if self.values.is_empty() {
            return 0.0;
        }
        let s: f64 = self.values.iter().map(|&v| v as f64).sum();
        (s / self.values.len() as f64) as f32
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        if let Some(index) = self.first_non_finite() {
            return Err(DataError::NonFinite { index });
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        write_header(&mut out, FLOAT_MAGIC, self.width, self.height);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes one float raster from the front of `bytes`, returning it and
    /// the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), DataError> {
        match decode(bytes)? {
            (Raster::Float(r), n) => Ok((r, n)),
            (Raster::Mask(_), _) => Err(DataError::BadMagic { found: MASK_MAGIC }),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| DataError::io(path, e))
    }
}

impl Mask8 {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self, DataError> {
        if values.len() != width * height {
            return Err(DataError::Shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|&v| v > 1) {
            return Err(DataError::NotBinary {
                index,
                value: values[index],
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        if let Some(index) = self.values.iter().position(|&v| v > 1) {
            return Err(DataError::NotBinary {
                index,
                value: self.values[index],
            });
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len());
        write_header(&mut out, MASK_MAGIC, self.width, self.height);
        out.extend_from_slice(&self.values);
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| DataError::io(path, e))
    }
}

fn write_header(out: &mut Vec<u8>, magic: [u8; 4], width: usize, height: usize) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
}

/// Writes either raster kind to `path`.
pub fn write_raster(r: &Raster, path: &Path) -> Result<(), DataError> {
    match r {
        Raster::Float(f) => f.write(path),
        Raster::Mask(m) => m.write(path),
    }
}

/// Reads a raster file, validating magic, payload length and contents.
pub fn read_raster(path: &Path) -> Result<Raster, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let (r, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(DataError::TrailingBytes {
            extra: bytes.len() - used,
        });
    }
    Ok(r)
}

pub fn read_f32(path: &Path) -> Result<RasterF32, DataError> {
    match read_raster(path)? {
        Raster::Float(r) => Ok(r),
        Raster::Mask(_) => Err(DataError::BadMagic { found: MASK_MAGIC }),
    }
}

pub fn read_mask(path: &Path) -> Result<Mask8, DataError> {
    match read_raster(path)? {
        Raster::Mask(m) => Ok(m),
        Raster::Float(_) => Err(DataError::BadMagic { found: FLOAT_MAGIC }),
    }
}

/// Decodes one raster from the front of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<(Raster, usize), DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let n = width * height;
    let payload = &bytes[HEADER_LEN..];
    match magic {
        FLOAT_MAGIC => {
            let need = 4 * n;
            if payload.len() < need {
                return Err(DataError::Truncated {
                    expected: HEADER_LEN + need,
                    actual: bytes.len(),
                });
            }
            let values: Vec<f32> = payload[..need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { index });
            }
            Ok((
                Raster::Float(RasterF32 {
                    width,
                    height,
                    values,
                }),
                HEADER_LEN + need,
            ))
        }
        MASK_MAGIC => {
            if payload.len() < n {
                return Err(DataError::Truncated {
                    expected: HEADER_LEN + n,
                    actual: bytes.len(),
                });
            }
            let values = payload[..n].to_vec();
            let m = Mask8::new(width, height, values)?;
            Ok((Raster::Mask(m), HEADER_LEN + n))
        }
        found => Err(DataError::BadMagic { found }),
    }
}
