//! Paired preprocessing: resampling a tile to the model resolution under a
//! shared geometric transform, plus independent photometric jitter on each
//! epoch's image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_delta, DataError, Image, Mask8, RasterF32, Tile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSpec {
    pub target_size: usize,
    pub flip: bool,
    pub p_hflip: f64,
    pub geometric: bool,
    /// Maximum absolute shift along each axis, output pixels.
    pub shift_px: f64,
    pub scale_range: (f64, f64),
    /// Maximum absolute rotation, degrees.
    pub rotation_deg: f64,
    pub noise: bool,
    pub noise_sigma: f32,
    pub radiometric: bool,
    /// Additive brightness offset range.
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub saturation: (f32, f32),
    /// Negative values blur, positive values sharpen.
    pub sharpness: (f32, f32),
    pub seed: u64,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            target_size: 256,
            flip: true,
            p_hflip: 0.5,
            geometric: true,
            shift_px: 16.0,
            scale_range: (0.9, 1.1),
            rotation_deg: 10.0,
            noise: true,
            noise_sigma: 0.01,
            radiometric: true,
            brightness: (-0.05, 0.05),
            contrast: (0.9, 1.1),
            saturation: (0.9, 1.1),
            sharpness: (-0.5, 0.5),
            seed: 0,
        }
    }
}

impl AugSpec {
    /// Plain resizing only; used for evaluation.
    pub fn resize_only(target_size: usize) -> Self {
        Self {
            target_size,
            flip: false,
            p_hflip: 0.0,
            geometric: false,
            shift_px: 0.0,
            scale_range: (1.0, 1.0),
            rotation_deg: 0.0,
            noise: false,
            noise_sigma: 0.0,
            radiometric: false,
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            sharpness: (0.0, 0.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.target_size == 0 {
            return Err("target_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_hflip) {
            return Err(format!("p_hflip {} not in [0,1]", self.p_hflip));
        }
        let finite = |v: f64| v.is_finite();
        if !finite(self.shift_px) || self.shift_px < 0.0 {
            return Err("shift_px must be finite and non-negative".into());
        }
        if !finite(self.rotation_deg) || self.rotation_deg < 0.0 {
            return Err("rotation_deg must be finite and non-negative".into());
        }
        let (s0, s1) = self.scale_range;
        if !(finite(s0) && finite(s1) && s0 > 0.0 && s0 <= s1) {
            return Err("scale_range must be positive and ordered".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err("noise_sigma must be finite and non-negative".into());
        }
        for (name, (a, b)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("sharpness", self.sharpness),
        ] {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(format!("{name} range must be finite and ordered"));
            }
        }
        Ok(())
    }
}

/// A concrete geometric transform shared by every layer of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeomTransform {
    pub flip: bool,
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl GeomTransform {
    pub const IDENTITY: GeomTransform = GeomTransform {
        flip: false,
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        rotation_deg: 0.0,
    };

    /// Maps an output pixel centre (target grid) to continuous source
    /// coordinates on a `src_w` x `src_h` raster, ignoring the flip.
    fn source_coords(&self, ox: usize, oy: usize, size: usize, src_w: usize, src_h: usize) -> (f64, f64) {
        let half = size as f64 / 2.0;
        let mut u = ox as f64 + 0.5 - half - self.dx;
        let mut v = oy as f64 + 0.5 - half - self.dy;
        if self.rotation_deg != 0.0 {
            let (s, c) = (-self.rotation_deg.to_radians()).sin_cos();
            (u, v) = (c * u - s * v, s * u + c * v);
        }
        u /= self.scale;
        v /= self.scale;
        (
            (u + half) * (src_w as f64 / size as f64) - 0.5,
            (v + half) * (src_h as f64 / size as f64) - 0.5,
        )
    }
}

/// Photometric jitter for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub sharpness: f32,
    pub noise_sigma: f32,
}

impl Photometric {
    pub const NONE: Photometric = Photometric {
        brightness: 0.0,
        contrast: 1.0,
        saturation: 1.0,
        sharpness: 0.0,
        noise_sigma: 0.0,
    };
}

/// One training/evaluation sample at model resolution. Images are planar
/// (band-major) `bands * size * size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSample {
    pub size: usize,
    pub bands: usize,
    pub x1: Vec<f32>,
    pub x2: Vec<f32>,
    pub y2d: Vec<u8>,
    /// ΔH divided by the dataset `h_scale`.
    pub y3d: Vec<f32>,
}

impl ModelSample {
    /// Mirrors every layer left-right.
    pub fn hflip(&self) -> ModelSample {
        let s = self.size;
        let flip = |v: &mut [f32]| v.chunks_mut(s).for_each(|row| row.reverse());
        let mut out = self.clone();
        flip(&mut out.x1);
        flip(&mut out.x2);
        flip(&mut out.y3d);
        out.y2d.chunks_mut(s).for_each(|row| row.reverse());
        out
    }
}

/// Counter-based RNG stream for one (epoch, tile) pair, so samples can be
/// built in any order.
pub fn sample_rng(seed: u64, epoch: u64, tile_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a17_ab1e_0000_0000);
    rng.set_stream(epoch.wrapping_mul(1 << 32).wrapping_add(tile_index));
    rng
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn uniform32<R: Rng>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_transform<R: Rng>(spec: &AugSpec, rng: &mut R) -> GeomTransform {
    let mut g = GeomTransform::IDENTITY;
    if spec.flip {
        g.flip = rng.random_bool(spec.p_hflip);
    }
    if spec.geometric {
        g.dx = uniform(rng, -spec.shift_px, spec.shift_px);
        g.dy = uniform(rng, -spec.shift_px, spec.shift_px);
        g.scale = uniform(rng, spec.scale_range.0, spec.scale_range.1);
        g.rotation_deg = uniform(rng, -spec.rotation_deg, spec.rotation_deg);
    }
    g
}

pub fn sample_photometric<R: Rng>(spec: &AugSpec, rng: &mut R) -> Photometric {
    let mut p = Photometric::NONE;
    if spec.radiometric {
        p.brightness = uniform32(rng, spec.brightness);
        p.contrast = uniform32(rng, spec.contrast);
        p.saturation = uniform32(rng, spec.saturation);
        p.sharpness = uniform32(rng, spec.sharpness);
    }
    if spec.noise {
        p.noise_sigma = spec.noise_sigma;
    }
    p
}

fn inside(c: f64, n: usize) -> bool {
    c >= -0.5 && c <= n as f64 - 0.5
}

fn sample_bilinear(r: &RasterF32, sx: f64, sy: f64) -> f32 {
    let sx = sx.clamp(0.0, (r.width - 1) as f64);
    let sy = sy.clamp(0.0, (r.height - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(r.width - 1);
    let y1 = (y0 + 1).min(r.height - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let top = r.get(x0, y0) as f64 * (1.0 - fx) + r.get(x1, y0) as f64 * fx;
    let bot = r.get(x0, y1) as f64 * (1.0 - fx) + r.get(x1, y1) as f64 * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn nearest_index(c: f64, n: usize) -> usize {
    ((c + 0.5).floor().max(0.0) as usize).min(n - 1)
}

fn warp_f32(r: &RasterF32, g: &GeomTransform, size: usize, mode: Interp, fill: f32) -> Vec<f32> {
    let mut out = vec![fill; size * size];
    for oy in 0..size {
        for ox in 0..size {
            let (sx, sy) = g.source_coords(ox, oy, size, r.width, r.height);
            if !(inside(sx, r.width) && inside(sy, r.height)) {
                continue;
            }
            out[oy * size + ox] = match mode {
                Interp::Bilinear => sample_bilinear(r, sx, sy),
                Interp::Nearest => r.get(nearest_index(sx, r.width), nearest_index(sy, r.height)),
            };
        }
    }
    if g.flip {
        out.chunks_mut(size).for_each(|row| row.reverse());
    }
    out
}

fn warp_mask(m: &Mask8, g: &GeomTransform, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size * size];
    for oy in 0..size {
        for ox in 0..size {
            let (sx, sy) = g.source_coords(ox, oy, size, m.width, m.height);
            if inside(sx, m.width) && inside(sy, m.height) {
                out[oy * size + ox] = m.get(nearest_index(sx, m.width), nearest_index(sy, m.height));
            }
        }
    }
    if g.flip {
        out.chunks_mut(size).for_each(|row| row.reverse());
    }
    out
}

/// Resizes a float raster to `out_size` x `out_size`.
pub fn resize(r: &RasterF32, out_size: usize, mode: Interp) -> RasterF32 {
    RasterF32 {
        width: out_size,
        height: out_size,
        values: warp_f32(r, &GeomTransform::IDENTITY, out_size, mode, 0.0),
    }
}

/// Nearest-neighbour resize of a binary mask.
pub fn resize_mask(m: &Mask8, out_size: usize) -> Mask8 {
    Mask8 {
        width: out_size,
        height: out_size,
        values: warp_mask(m, &GeomTransform::IDENTITY, out_size),
    }
}

fn box_blur(plane: &[f32], size: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0f32;
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    let xx = (x as i64 + dx).clamp(0, size as i64 - 1) as usize;
                    let yy = (y as i64 + dy).clamp(0, size as i64 - 1) as usize;
                    acc += plane[yy * size + xx];
                }
            }
            out[y * size + x] = acc / 9.0;
        }
    }
    out
}

fn apply_photometric<R: Rng>(planes: &mut [f32], bands: usize, size: usize, p: &Photometric, rng: &mut R) {
    let n = size * size;
    if *p != Photometric::NONE {
        for b in 0..bands {
            let plane = &mut planes[b * n..(b + 1) * n];
            let mean = plane.iter().sum::<f32>() / n as f32;
            for v in plane.iter_mut() {
                *v = mean + p.contrast * (*v - mean) + p.brightness;
            }
        }
        if bands >= 3 && p.saturation != 1.0 {
            for i in 0..n {
                let gray = (planes[i] + planes[n + i] + planes[2 * n + i]) / 3.0;
                for b in 0..3 {
                    let v = &mut planes[b * n + i];
                    *v = gray + p.saturation * (*v - gray);
                }
            }
        }
        if p.sharpness != 0.0 {
            for b in 0..bands {
                let plane = &mut planes[b * n..(b + 1) * n];
                let blurred = box_blur(plane, size);
                for (v, bl) in plane.iter_mut().zip(blurred) {
                    *v += p.sharpness * (*v - bl);
                }
            }
        }
    }
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, p.noise_sigma).expect("finite sigma");
        for v in planes.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    if *p != Photometric::NONE {
        for v in planes.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn warp_image(img: &Image, g: &GeomTransform, size: usize) -> Vec<f32> {
    img.bands
        .iter()
        .flat_map(|b| warp_f32(b, g, size, Interp::Bilinear, b.mean()))
        .collect()
}

/// Applies `g` to every layer of the tile, then independent photometric
/// jitter to each image. Targets are resampled nearest-neighbour and ΔH is
/// normalized by `h_scale`.
pub fn apply_paired<R: Rng>(
    t: &Tile,
    g: &GeomTransform,
    spec: &AugSpec,
    h_scale: f64,
    rng: &mut R,
) -> Result<ModelSample, DataError> {
    let size = spec.target_size;
    let bands = t.img1.band_count();
    if t.img2.band_count() != bands {
        return Err(DataError::Shape("epoch images differ in band count".into()));
    }
    let mut x1 = warp_image(&t.img1, g, size);
    let mut x2 = warp_image(&t.img2, g, size);
    let p1 = sample_photometric(spec, rng);
    apply_photometric(&mut x1, bands, size, &p1, rng);
    let p2 = sample_photometric(spec, rng);
    apply_photometric(&mut x2, bands, size, &p2, rng);

    let y2d = warp_mask(&t.mask2d, g, size);
    let y3d = warp_f32(&t.delta3d, g, size, Interp::Nearest, 0.0)
        .into_iter()
        .map(|v| normalize_delta(v as f64, h_scale).map(|u| u as f32))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelSample {
        size,
        bands,
        x1,
        x2,
        y2d,
        y3d,
    })
}

/// Full training-time pipeline for one tile: samples the transform and
/// jitter from `rng` and applies them.
pub fn augment<R: Rng>(t: &Tile, spec: &AugSpec, h_scale: f64, rng: &mut R) -> Result<ModelSample, DataError> {
    let g = sample_transform(spec, rng);
    apply_paired(t, &g, spec, h_scale, rng)
}

/// Evaluation-time preprocessing: plain resize, no randomness.
pub fn prepare_eval(t: &Tile, size: usize, h_scale: f64) -> Result<ModelSample, DataError> {
    let spec = AugSpec::resize_only(size);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    apply_paired(t, &GeomTransform::IDENTITY, &spec, h_scale, &mut rng)
}

/// Both epoch images resized to `size`, planar, without targets.
pub fn prepare_images(img1: &Image, img2: &Image, size: usize) -> Result<(Vec<f32>, Vec<f32>), DataError> {
    if img1.band_count() != img2.band_count() {
        return Err(DataError::Shape("epoch images differ in band count".into()));
    }
    let g = GeomTransform::IDENTITY;
    Ok((warp_image(img1, &g, size), warp_image(img2, &g, size)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_tile, SynthSpec};
    use proptest::prelude::*;

    fn tile() -> Tile {
        generate_tile(
            &SynthSpec {
                seed: 3,
                ..SynthSpec::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn resize_400_to_256() {
        let r = RasterF32::filled(400, 400, 0.25);
        let out = resize(&r, 256, Interp::Bilinear);
        assert_eq!((out.width, out.height), (256, 256));
        assert!(out.values.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn nearest_mask_resize_stays_binary() {
        let t = tile();
        let m = resize_mask(&t.mask2d, 256);
        assert!(m.values.iter().all(|&v| v <= 1));
        assert!(m.count_ones() > 0);
    }

    #[test]
    fn degenerate_spec_samples_identity() {
        let spec = AugSpec::resize_only(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_transform(&spec, &mut rng), GeomTransform::IDENTITY);
        }
    }

    #[test]
    fn same_seed_same_transform() {
        let spec = AugSpec::default();
        let a = sample_transform(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_transform(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn flip_rate_within_three_sigma() {
        let spec = AugSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let flips = (0..n).filter(|_| sample_transform(&spec, &mut rng).flip).count();
        let p = spec.p_hflip;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((flips as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{flips}");
    }

    #[test]
    fn identity_no_jitter_equals_plain_resize() {
        let t = tile();
        let spec = AugSpec::resize_only(64);
        let s = apply_paired(&t, &GeomTransform::IDENTITY, &spec, 35.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let band0 = resize(&t.img1.bands[0], 64, Interp::Bilinear);
        assert_eq!(&s.x1[..64 * 64], &band0.values[..]);
        assert_eq!(s.y2d, resize_mask(&t.mask2d, 64).values);
        let d = resize(&t.delta3d, 64, Interp::Nearest);
        let y: Vec<f32> = d.values.iter().map(|v| (*v as f64 / 35.0) as f32).collect();
        assert_eq!(s.y3d, y);
    }

    #[test]
    fn flip_preserves_change_count_and_is_involution() {
        let t = tile();
        let spec = AugSpec::resize_only(96);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = apply_paired(&t, &GeomTransform::IDENTITY, &spec, 35.0, &mut rng).unwrap();
        let g = GeomTransform {
            flip: true,
            ..GeomTransform::IDENTITY
        };
        let flipped = apply_paired(&t, &g, &spec, 35.0, &mut rng).unwrap();
        let count = |s: &ModelSample| s.y2d.iter().filter(|&&v| v == 1).count();
        assert_eq!(count(&plain), count(&flipped));
        assert_eq!(flipped.hflip(), plain);
        assert_eq!(plain.hflip().hflip(), plain);
    }

    #[test]
    fn targets_agree_with_each_other_after_warp() {
        let t = tile();
        let spec = AugSpec {
            target_size: 128,
            ..AugSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let s = augment(&t, &spec, 35.0, &mut rng).unwrap();
            for (m, d) in s.y2d.iter().zip(&s.y3d) {
                assert_eq!(*m == 1, *d != 0.0);
            }
        }
    }

    #[test]
    fn pipeline_reproducible() {
        let t = tile();
        let spec = AugSpec {
            target_size: 64,
            ..AugSpec::default()
        };
        let a = augment(&t, &spec, 35.0, &mut sample_rng(1, 2, 3)).unwrap();
        let b = augment(&t, &spec, 35.0, &mut sample_rng(1, 2, 3)).unwrap();
        assert_eq!(a, b);
        let c = augment(&t, &spec, 35.0, &mut sample_rng(1, 2, 4)).unwrap();
        assert_ne!(a, c);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shift_and_flip_preserve_nonzero_delta_values(
            dx in -3i32..=3, dy in -3i32..=3, flip in any::<bool>()
        ) {
            // pure integer shifts at 1:1 scale relocate without blending
            let mut d = RasterF32::filled(16, 16, 0.0);
            d.set(5, 7, 4.0);
            d.set(8, 8, -12.5);
            d.set(10, 3, 30.0);
            let g = GeomTransform { flip, dx: dx as f64, dy: dy as f64, scale: 1.0, rotation_deg: 0.0 };
            let out = warp_f32(&d, &g, 16, Interp::Nearest, 0.0);
            let mut a: Vec<f32> = d.values.iter().copied().filter(|v| *v != 0.0).collect();
            let mut b: Vec<f32> = out.into_iter().filter(|v| *v != 0.0).collect();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn outputs_stay_in_range(seed in 0u64..1000) {
            let t = tile();
            let spec = AugSpec { target_size: 32, ..AugSpec::default() };
            let s = augment(&t, &spec, 35.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(s.y2d.iter().all(|&v| v <= 1));
            prop_assert!(s.y3d.iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert_eq!(s.x1.len(), 3 * 32 * 32);
        }
    }
}
