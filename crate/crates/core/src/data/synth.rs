//! Procedural bitemporal urban scenes with exact ground truth.
//!
//! Every tile is a smooth terrain with flat-roofed rectangular buildings.
//! Between the epochs some buildings are demolished and new ones are built;
//! the ΔH raster holds the sampled change on those footprints and zero
//! elsewhere, and the optical images are shaded top views of each DSM.

use std::f32::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, MANIFEST_VERSION};
use super::raster::{Mask8, RasterF32};
use super::tile::{write_tile, Image, Tile, TileMeta};
use super::{DataError, DEFAULT_H_SCALE, DH_MAX, DH_MIN, DH_THRESHOLD, DSM_SIZE, IMAGE_SIZE};

/// Closed interval of admissible elevation changes, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhInterval {
    pub lo: f32,
    pub hi: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_tiles: usize,
    /// Unchanged buildings per tile, inclusive range.
    pub static_buildings: (usize, usize),
    /// Building side length in DSM pixels, inclusive range.
    pub footprint_px: (usize, usize),
    pub dh_ranges: Vec<DhInterval>,
    /// Target fraction of changed pixels per tile.
    pub change_fraction: f64,
    /// Standard deviation of the per-epoch image noise (reflectance units).
    pub noise: f32,
    pub bands: usize,
    /// Train/val/test proportions.
    pub split_fractions: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tiles: 8,
            static_buildings: (3, 8),
            footprint_px: (8, 30),
            dh_ranges: vec![
                DhInterval { lo: -30.0, hi: -1.0 },
                DhInterval { lo: 1.0, hi: 35.0 },
            ],
            change_fraction: 0.045,
            noise: 0.02,
            bands: 3,
            split_fractions: [0.68, 0.09, 0.23],
        }
    }
}

/// Per-tile tolerance on the changed-pixel fraction.
const FRACTION_TOL: f64 = 0.01;
const PLACEMENT_ATTEMPTS: usize = 400;
const TILE_RETRIES: usize = 16;
const MARGIN: usize = 2;

impl SynthSpec {
    /// Few large buildings and plenty of change, so that scenes stay legible
    /// after downsampling to a very small model input.
    pub fn desk(n_tiles: usize, seed: u64) -> Self {
        Self {
            seed,
            n_tiles,
            static_buildings: (1, 3),
            footprint_px: (40, 70),
            change_fraction: 0.15,
            split_fractions: [1.0, 0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Synth(m));
        if self.static_buildings.0 > self.static_buildings.1 {
            return bad("static_buildings range is empty".into());
        }
        let (fmin, fmax) = self.footprint_px;
        if fmin == 0 || fmin > fmax || fmax > DSM_SIZE / 2 {
            return bad(format!("footprint range {fmin}..={fmax} invalid"));
        }
        if self.dh_ranges.is_empty() {
            return bad("no ΔH intervals".into());
        }
        for r in &self.dh_ranges {
            let ok = r.lo <= r.hi
                && r.lo >= DH_MIN
                && r.hi <= DH_MAX
                && (r.hi <= -DH_THRESHOLD || r.lo >= DH_THRESHOLD);
            if !ok {
                return bad(format!("ΔH interval [{}, {}] invalid", r.lo, r.hi));
            }
        }
        if !(self.change_fraction > 0.0 && self.change_fraction < 1.0) {
            return bad(format!("change_fraction {} not in (0,1)", self.change_fraction));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative".into());
        }
        if self.bands == 0 || self.bands > u8::MAX as usize {
            return bad("band count must be in 1..=255".into());
        }
        let s: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| *f < 0.0) || (s - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1".into());
        }
        Ok(())
    }

    fn sample_dh(&self, rng: &mut ChaCha8Rng) -> f32 {
        let total: f32 = self.dh_ranges.iter().map(|r| r.hi - r.lo).sum();
        let r = if total > 0.0 {
            let mut t = rng.random::<f32>() * total;
            let mut pick = self.dh_ranges[self.dh_ranges.len() - 1];
            for r in &self.dh_ranges {
                if t < r.hi - r.lo {
                    pick = *r;
                    break;
                }
                t -= r.hi - r.lo;
            }
            pick
        } else {
            self.dh_ranges[rng.random_range(0..self.dh_ranges.len())]
        };
        if r.hi > r.lo {
            rng.random_range(r.lo..=r.hi)
        } else {
            r.lo
        }
    }

    fn split_counts(&self) -> [usize; 3] {
        let n = self.n_tiles;
        let train = ((self.split_fractions[0] * n as f64).round() as usize).min(n);
        let val = ((self.split_fractions[1] * n as f64).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn area(&self) -> usize {
        self.w * self.h
    }
}

struct Occupancy {
    cells: Vec<bool>,
}

impl Occupancy {
    fn new() -> Self {
        Self {
            cells: vec![false; DSM_SIZE * DSM_SIZE],
        }
    }

    fn free(&self, r: &Rect) -> bool {
        let x0 = r.x.saturating_sub(MARGIN);
        let y0 = r.y.saturating_sub(MARGIN);
        let x1 = (r.x + r.w + MARGIN).min(DSM_SIZE);
        let y1 = (r.y + r.h + MARGIN).min(DSM_SIZE);
        (y0..y1).all(|y| (x0..x1).all(|x| !self.cells[y * DSM_SIZE + x]))
    }

    fn mark(&mut self, r: &Rect) {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                self.cells[y * DSM_SIZE + x] = true;
            }
        }
    }

    fn place(&mut self, rng: &mut ChaCha8Rng, w: usize, h: usize) -> Option<Rect> {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = Rect {
                x: rng.random_range(0..=DSM_SIZE - w),
                y: rng.random_range(0..=DSM_SIZE - h),
                w,
                h,
            };
            if self.free(&r) {
                self.mark(&r);
                return Some(r);
            }
        }
        None
    }
}

struct Layout {
    changed: Vec<(Rect, f32)>,
    fixed: Vec<(Rect, f32)>,
}

fn layout_tile(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Option<Layout> {
    let (fmin, fmax) = spec.footprint_px;
    let total = (DSM_SIZE * DSM_SIZE) as f64;
    let target = spec.change_fraction * total;
    let tol = FRACTION_TOL * total;
    let mut occ = Occupancy::new();
    let mut changed = Vec::new();
    let mut covered = 0usize;

    while (covered as f64) < target - tol {
        let room = (target + tol - covered as f64).floor() as usize;
        if fmin * fmin > room {
            return None;
        }
        let w = rng.random_range(fmin..=fmax);
        let mut h = rng.random_range(fmin..=fmax);
        let w = w.min(room / fmin).max(fmin);
        if w * h > room {
            h = (room / w).max(fmin);
        }
        let rect = occ.place(rng, w, h)?;
        covered += rect.area();
        changed.push((rect, spec.sample_dh(rng)));
    }

    let n_static = rng.random_range(spec.static_buildings.0..=spec.static_buildings.1);
    let mut fixed = Vec::new();
    for _ in 0..n_static {
        let w = rng.random_range(fmin..=fmax);
        let h = rng.random_range(fmin..=fmax);
        if let Some(rect) = occ.place(rng, w, h) {
            fixed.push((rect, rng.random_range(3.0f32..25.0)));
        }
    }
    Some(Layout { changed, fixed })
}

fn tile_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Builds tile `index` of the dataset described by `spec`.
pub fn generate_tile(spec: &SynthSpec, index: usize) -> Result<Tile, DataError> {
    spec.validate()?;
    let mut rng = tile_rng(spec.seed, index);
    let layout = (0..TILE_RETRIES)
        .find_map(|_| layout_tile(spec, &mut rng))
        .ok_or_else(|| {
            DataError::Synth(format!(
                "change fraction {} unreachable for tile {index} after {TILE_RETRIES} retries",
                spec.change_fraction
            ))
        })?;

    let terrain = terrain(&mut rng);
    let mut dsm1 = terrain.clone();
    let mut delta = RasterF32::filled(DSM_SIZE, DSM_SIZE, 0.0);
    // building id per pixel, used for roof colour: 0 = ground
    let mut roof1 = vec![0u32; DSM_SIZE * DSM_SIZE];
    let mut roof2 = vec![0u32; DSM_SIZE * DSM_SIZE];
    let mut tone = vec![0.0f32];

    for (i, (r, h)) in layout.fixed.iter().enumerate() {
        tone.push(rng.random_range(-0.04f32..0.04));
        fill(r, |p| {
            dsm1.values[p] += h;
            roof1[p] = i as u32 + 1;
            roof2[p] = i as u32 + 1;
        });
    }
    let base = layout.fixed.len() as u32 + 1;
    for (i, (r, dh)) in layout.changed.iter().enumerate() {
        tone.push(rng.random_range(-0.04f32..0.04));
        let id = base + i as u32;
        fill(r, |p| {
            delta.values[p] = *dh;
            if *dh < 0.0 {
                dsm1.values[p] += -dh;
                roof1[p] = id;
            } else {
                roof2[p] = id;
            }
        });
    }
    let mut dsm2 = dsm1.clone();
    for (d2, d) in dsm2.values.iter_mut().zip(&delta.values) {
        *d2 += d;
    }

    let mask_vals: Vec<u8> = (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|p| {
            let (x, y) = (p % IMAGE_SIZE, p / IMAGE_SIZE);
            u8::from(delta.get(x / 2, y / 2) != 0.0)
        })
        .collect();
    let mask2d = Mask8::new(IMAGE_SIZE, IMAGE_SIZE, mask_vals)?;

    let texture = ground_texture(&mut rng);
    let img1 = render(spec, &mut rng, &dsm1, &terrain, &roof1, &tone, &texture);
    let img2 = render(spec, &mut rng, &dsm2, &terrain, &roof2, &tone, &texture);

    Ok(Tile {
        meta: TileMeta {
            tile_id: format!("tile_{index:04}"),
            gsd_image: 0.5,
            gsd_dsm: 1.0,
            bands: spec.bands,
            epoch_1: "2010".into(),
            epoch_2: "2017".into(),
        },
        img1,
        img2,
        dsm1,
        dsm2,
        mask2d,
        delta3d: delta,
    })
}

fn fill(r: &Rect, mut f: impl FnMut(usize)) {
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            f(y * DSM_SIZE + x);
        }
    }
}

fn terrain(rng: &mut ChaCha8Rng) -> RasterF32 {
    let base = rng.random_range(20.0f32..60.0);
    let waves: Vec<(f32, f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5f32..2.5),
                rng.random_range(0.005f32..0.03),
                rng.random_range(0.005f32..0.03),
                rng.random_range(0.0f32..TAU),
                rng.random_range(0.0f32..TAU),
            )
        })
        .collect();
    let mut r = RasterF32::filled(DSM_SIZE, DSM_SIZE, base);
    for y in 0..DSM_SIZE {
        for x in 0..DSM_SIZE {
            let mut z = base;
            for &(a, fx, fy, px, py) in &waves {
                z += a * (fx * x as f32 + px).sin() * (fy * y as f32 + py).cos();
            }
            r.set(x, y, z);
        }
    }
    r
}

/// Low-frequency ground pattern shared by both epochs.
fn ground_texture(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (fx, fy, ph) = (
        rng.random_range(0.02f32..0.08),
        rng.random_range(0.02f32..0.08),
        rng.random_range(0.0f32..TAU),
    );
    (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|p| {
            let (x, y) = ((p % IMAGE_SIZE) as f32, (p / IMAGE_SIZE) as f32);
            0.04 * (fx * x + ph).sin() * (fy * y).cos()
        })
        .collect()
}

const GROUND: [f32; 3] = [0.30, 0.42, 0.22];
const ROOF: [f32; 3] = [0.48, 0.44, 0.42];
const HEIGHT_REF: f32 = 35.0;

/// Shaded top view of a DSM: hillshade times an albedo that brightens with
/// height above ground, plus per-epoch noise.
fn render(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    dsm: &RasterF32,
    terrain: &RasterF32,
    roof: &[u32],
    tone: &[f32],
    texture: &[f32],
) -> Image {
    let gain = rng.random_range(0.97f32..1.03);
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).expect("valid sigma");
    // light from the north-west
    let (lx, ly, lz) = (-0.5f32, -0.5f32, 0.707f32);
    let mut shade = vec![0.0f32; DSM_SIZE * DSM_SIZE];
    for y in 0..DSM_SIZE {
        for x in 0..DSM_SIZE {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(DSM_SIZE - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(DSM_SIZE - 1);
            let dzdx = (dsm.get(xp, y) - dsm.get(xm, y)) / (xp - xm) as f32;
            let dzdy = (dsm.get(x, yp) - dsm.get(x, ym)) / (yp - ym) as f32;
            let n = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            let cos = (-dzdx * lx - dzdy * ly + lz) / n;
            shade[y * DSM_SIZE + x] = 0.55 + 0.45 * cos.clamp(0.0, 1.0);
        }
    }
    let bands = (0..spec.bands)
        .map(|b| {
            let c = b % 3;
            let values = (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|p| {
                    let (x, y) = (p % IMAGE_SIZE, p / IMAGE_SIZE);
                    let q = (y / 2) * DSM_SIZE + x / 2;
                    let id = roof[q] as usize;
                    let v = if id == 0 {
                        GROUND[c] * shade[q] + texture[p]
                    } else {
                        let hag = ((dsm.values[q] - terrain.values[q]) / HEIGHT_REF).clamp(0.0, 1.2);
                        (ROOF[c] + tone[id]) * shade[q] * (0.55 + 0.45 * hag) + 0.25 * hag
                    };
                    let n = if spec.noise > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                    (gain * v + n).clamp(0.0, 1.0)
                })
                .collect();
            RasterF32 {
                width: IMAGE_SIZE,
                height: IMAGE_SIZE,
                values,
            }
        })
        .collect();
    Image { bands }
}

/// Writes a full synthetic dataset under `root` and returns its manifest.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest, DataError> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;
    let tiles: Vec<Result<Tile, DataError>> =
        crate::exec::map_indexed(spec.n_tiles, |i| generate_tile(spec, i));
    let mut ids = Vec::with_capacity(spec.n_tiles);
    let mut max_dh = 0.0f32;
    for t in tiles {
        let t = t?;
        max_dh = t.delta3d.values.iter().fold(max_dh, |m, v| m.max(v.abs()));
        write_tile(root, &t)?;
        ids.push(t.meta.tile_id);
    }
    let [n_train, n_val, _] = spec.split_counts();
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        h_scale: if max_dh > 0.0 {
            max_dh as f64
        } else {
            DEFAULT_H_SCALE as f64
        },
        gsd_image: 0.5,
        gsd_dsm: 1.0,
        epoch_1: "2010".into(),
        epoch_2: "2017".into(),
        crs: "EPSG:3042".into(),
        train: ids,
        val,
        test,
        root: root.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save()?;
    Ok(manifest)
}
