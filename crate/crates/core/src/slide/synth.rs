//! Deterministic synthetic H&E-like slides with exact ground truth.
//!
//! A slide is a white canvas holding one irregular tissue region filled with
//! stroma, into which textured blobs of the other classes are painted. Two
//! appearance domains exist: `A` plays the bootstrap (source) cancer type,
//! `B` the target one, where carcinoma, stroma, necrosis and ink markers look
//! different. The mutation-texture flag halves the nuclear spacing of
//! carcinoma, raising its texture frequency.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{open_slide, write_pyramid, SlidePyramid, DEFAULT_BASE_MAGNIFICATION, DEFAULT_TILE_SIZE};
use crate::error::{Error, Result};
use crate::raster::{self, GrayImage, RgbImage};
use crate::segnet::{CARCINOMA, NUM_CLASSES};

/// Smallest canvas side that still holds a full 5× context patch with margin.
pub const MIN_CANVAS: u32 = 3072;

const STROMA: u8 = 2;
const BACKGROUND: u8 = 5;
/// Painting order; later classes overwrite earlier ones.
const PAINT_ORDER: [u8; 6] = [4, 3, 1, 2, 0, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_tile")]
    pub tile_size: u32,
    #[serde(default = "default_mag")]
    pub base_magnification: f64,
    #[serde(default)]
    pub domain: Domain,
    /// Blob counts per class, in class-index order. Background blobs are ink
    /// markers drawn over tissue.
    pub blobs: [u32; NUM_CLASSES],
    /// Blob radius range in base pixels.
    #[serde(default = "default_radius")]
    pub blob_radius: (f64, f64),
    #[serde(default)]
    pub mutation_texture: bool,
}

fn default_tile() -> u32 {
    DEFAULT_TILE_SIZE
}
fn default_mag() -> f64 {
    DEFAULT_BASE_MAGNIFICATION
}
fn default_radius() -> (f64, f64) {
    (160.0, 380.0)
}

impl Default for Domain {
    fn default() -> Self {
        Domain::A
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: MIN_CANVAS,
            height: MIN_CANVAS,
            tile_size: DEFAULT_TILE_SIZE,
            base_magnification: DEFAULT_BASE_MAGNIFICATION,
            domain: Domain::A,
            blobs: [3, 1, 0, 1, 1, 0],
            blob_radius: default_radius(),
            mutation_texture: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_CANVAS || self.height < MIN_CANVAS {
            return Err(Error::Spec(format!(
                "canvas {}x{} is smaller than {MIN_CANVAS}x{MIN_CANVAS}",
                self.width, self.height
            )));
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Spec(format!("bad blob radius range ({lo}, {hi})")));
        }
        if self.tile_size == 0 || !(self.base_magnification > 0.0) {
            return Err(Error::Spec("tile size and magnification must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    /// Jittered lattice of round nuclei; `cell` is the lattice pitch.
    Nuclei { cell: f64, radius: f64 },
    Stripes { period: f64, angle: f64 },
    Speckle { scale: f64 },
    Membranes { cell: f64, thickness: f64 },
    Flat,
}

/// Colour model of one class: `base` blended toward `ink` by the pattern.
#[derive(Debug, Clone, Copy)]
pub struct Appearance {
    base: [u8; 3],
    ink: [u8; 3],
    pattern: Pattern,
}

impl Appearance {
    pub fn of(domain: Domain, class: u8, mutation: bool) -> Self {
        use Pattern::*;
        let nuclear_pitch = |pitch: f64| if mutation { pitch / 2.0 } else { pitch };
        let (base, ink, pattern) = match (domain, class) {
            (Domain::A, 0) => ([200, 130, 190], [70, 30, 110], Nuclei { cell: nuclear_pitch(28.0), radius: 0.36 }),
            (Domain::B, 0) => ([232, 152, 188], [112, 62, 150], Nuclei { cell: nuclear_pitch(36.0), radius: 0.30 }),
            (_, 1) => ([226, 172, 206], [125, 75, 155], Nuclei { cell: 22.0, radius: 0.24 }),
            (Domain::A, 2) => ([236, 152, 186], [206, 108, 152], Stripes { period: 14.0, angle: 0.6 }),
            (Domain::B, 2) => ([188, 108, 160], [122, 62, 132], Stripes { period: 10.0, angle: 2.1 }),
            (Domain::A, 3) => ([216, 182, 176], [172, 122, 132], Speckle { scale: 6.0 }),
            (Domain::B, 3) => ([168, 90, 142], [102, 52, 122], Speckle { scale: 5.0 }),
            (_, 4) => ([248, 244, 246], [222, 158, 190], Membranes { cell: 56.0, thickness: 3.0 }),
            (Domain::A, _) => ([62, 92, 62], [34, 62, 42], Flat),
            (Domain::B, _) => ([52, 62, 132], [30, 40, 92], Flat),
        };
        Self { base, ink, pattern }
    }

    fn intensity(&self, seed: u64, class: u8, x: u32, y: u32) -> f64 {
        let (xf, yf) = (x as f64, y as f64);
        match self.pattern {
            Pattern::Nuclei { cell, radius } => {
                let (ci, cj) = ((xf / cell).floor() as i64, (yf / cell).floor() as i64);
                let h = hash4(seed, class as u64, ci as u64, cj as u64);
                let jx = 0.3 + 0.4 * unit(h);
                let jy = 0.3 + 0.4 * unit(h >> 20);
                let dx = xf / cell - ci as f64 - jx;
                let dy = yf / cell - cj as f64 - jy;
                if dx * dx + dy * dy < radius * radius {
                    1.0
                } else {
                    0.0
                }
            }
            Pattern::Stripes { period, angle } => {
                let u = xf * angle.cos() + yf * angle.sin() + 4.0 * (yf / 37.0).sin();
                0.5 + 0.5 * (TAU * u / period).sin()
            }
            Pattern::Speckle { scale } => {
                let (u, v) = (xf / scale, yf / scale);
                let (i, j) = (u.floor(), v.floor());
                let (fu, fv) = (u - i, v - j);
                let at = |di: f64, dj: f64| {
                    unit(hash4(seed, 100 + class as u64, (i + di) as u64, (j + dj) as u64))
                };
                let top = at(0.0, 0.0) * (1.0 - fu) + at(1.0, 0.0) * fu;
                let bottom = at(0.0, 1.0) * (1.0 - fu) + at(1.0, 1.0) * fu;
                top * (1.0 - fv) + bottom * fv
            }
            Pattern::Membranes { cell, thickness } => {
                let wx = xf + 6.0 * (yf / 23.0).sin();
                let wy = yf + 6.0 * (xf / 29.0).sin();
                if wx.rem_euclid(cell) < thickness || wy.rem_euclid(cell) < thickness {
                    1.0
                } else {
                    0.0
                }
            }
            Pattern::Flat => 0.5,
        }
    }

    fn color(&self, seed: u64, class: u8, x: u32, y: u32) -> [u8; 3] {
        let t = self.intensity(seed, class, x, y);
        let n = hash4(seed, 7, x as u64, y as u64);
        [0, 1, 2].map(|c| {
            let v = self.base[c] as f64 * (1.0 - t) + self.ink[c] as f64 * t;
            let jitter = ((n >> (c * 8)) & 0xff) as f64 / 255.0 * 18.0 - 9.0;
            (v + jitter).round().clamp(0.0, 254.0) as u8
        })
    }
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn hash4(a: u64, b: u64, c: u64, d: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(a) ^ b) ^ c) ^ d)
}

#[inline]
fn unit(h: u64) -> f64 {
    (h & 0xFFFFF) as f64 / 0xFFFFF as f64
}

/// Irregular closed region: a radius modulated by two harmonics.
#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    a3: f64,
    p3: f64,
    a5: f64,
    p5: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, rx: f64, ry: f64) -> Self {
        Self {
            cx,
            cy,
            rx,
            ry,
            a3: rng.gen_range(0.0..0.12),
            p3: rng.gen_range(0.0..TAU),
            a5: rng.gen_range(0.0..0.06),
            p5: rng.gen_range(0.0..TAU),
        }
    }

    fn max_radius(&self) -> f64 {
        self.rx.max(self.ry) * (1.0 + self.a3 + self.a5)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let r2 = dx * dx + dy * dy;
        let theta = dy.atan2(dx);
        let m = 1.0 + self.a3 * (3.0 * theta + self.p3).sin() + self.a5 * (5.0 * theta + self.p5).sin();
        r2 <= m * m
    }

    fn paint(&self, gt: &mut GrayImage, class: u8, only_over_tissue: bool) {
        let r = self.max_radius();
        let x0 = (self.cx - r).floor().max(0.0) as u32;
        let y0 = (self.cy - r).floor().max(0.0) as u32;
        let x1 = ((self.cx + r).ceil() as u32).min(gt.width);
        let y1 = ((self.cy + r).ceil() as u32).min(gt.height);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5)
                    && (!only_over_tissue || gt.get(x, y) != BACKGROUND)
                {
                    gt.set(x, y, class);
                }
            }
        }
    }
}

/// A generated slide: the on-disk pyramid plus its exact class map at base
/// magnification.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub dir: PathBuf,
    pub pyramid: SlidePyramid,
    pub ground_truth: GrayImage,
}

impl SyntheticSlide {
    pub fn ground_truth_path(dir: &Path) -> PathBuf {
        dir.join("ground_truth.png")
    }

    pub fn load_ground_truth(dir: &Path) -> Result<GrayImage> {
        raster::read_gray_png(&Self::ground_truth_path(dir))
    }

    pub fn cancer_pixels(&self) -> usize {
        self.ground_truth
            .data
            .iter()
            .filter(|&&c| c == CARCINOMA)
            .count()
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    spec: &'a SyntheticSpec,
    seed: u64,
}

/// Renders the class map and RGB image for `spec`/`seed` without touching disk.
pub fn render_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(RgbImage, GrayImage)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt = GrayImage::filled(w, h, BACKGROUND);

    let cx = w as f64 * rng.gen_range(0.47..0.53);
    let cy = h as f64 * rng.gen_range(0.47..0.53);
    let tissue = Blob::random(
        &mut rng,
        cx,
        cy,
        w as f64 * 0.40,
        h as f64 * 0.38,
    );
    tissue.paint(&mut gt, STROMA, false);

    for &class in &PAINT_ORDER {
        for _ in 0..spec.blobs[class as usize] {
            // Centres fall inside the tissue ellipse's inner 70%.
            let (cx, cy) = loop {
                let u = rng.gen_range(-1.0..1.0f64);
                let v = rng.gen_range(-1.0..1.0f64);
                if u * u + v * v <= 1.0 {
                    break (tissue.cx + 0.7 * u * tissue.rx, tissue.cy + 0.7 * v * tissue.ry);
                }
            };
            let r = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1);
            let aspect = rng.gen_range(0.75..1.0);
            let (rx, ry) = if rng.gen_bool(0.5) { (r, r * aspect) } else { (r * aspect, r) };
            Blob::random(&mut rng, cx, cy, rx, ry).paint(&mut gt, class, true);
        }
    }

    let tex_seed = rng.gen::<u64>();
    let looks: Vec<Appearance> = (0..NUM_CLASSES as u8)
        .map(|c| Appearance::of(spec.domain, c, spec.mutation_texture))
        .collect();
    let mut img = RgbImage::white(w, h);
    // Background pixels inside the tissue outline are ink markers; the rest
    // of the background is bare glass.
    for y in 0..h {
        for x in 0..w {
            let class = gt.get(x, y);
            if class == BACKGROUND && !tissue.contains(x as f64 + 0.5, y as f64 + 0.5) {
                continue;
            }
            img.put(x, y, looks[class as usize].color(tex_seed, class, x, y));
        }
    }
    Ok((img, gt))
}

/// Generates a slide into `dir` (which must not already hold a slide).
pub fn generate_synthetic_slide(
    spec: &SyntheticSpec,
    seed: u64,
    slide_id: &str,
    dir: &Path,
) -> Result<SyntheticSlide> {
    spec.validate()?;
    if dir.join("slide.json").exists() {
        return Err(Error::Conflict(format!(
            "{} already holds a slide",
            dir.display()
        )));
    }
    let (img, gt) = render_synthetic(spec, seed)?;
    write_pyramid(dir, slide_id, &img, spec.base_magnification, spec.tile_size, Some(0.5))?;
    raster::write_atomic(
        &SyntheticSlide::ground_truth_path(dir),
        &raster::encode_gray_png(&gt)?,
    )?;
    raster::write_json(&dir.join("synthetic.json"), &Provenance { spec, seed })?;
    Ok(SyntheticSlide {
        dir: dir.to_path_buf(),
        pyramid: open_slide(dir)?,
        ground_truth: gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            blobs: [1, 0, 0, 0, 0, 0],
            ..Default::default()
        }
    }

    #[test]
    fn rejects_small_canvas() {
        let spec = SyntheticSpec {
            width: 2048,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_slide(&small_spec(), 7, "s", a.path()).unwrap();
        generate_synthetic_slide(&small_spec(), 7, "s", b.path()).unwrap();
        for rel in ["slide.json", "ground_truth.png", "level_0/tile_2_3.png", "level_3/tile_0_0.png"] {
            let x = std::fs::read(a.path().join(rel)).unwrap();
            let y = std::fs::read(b.path().join(rel)).unwrap();
            assert!(x == y, "{rel} differs");
        }
    }

    #[test]
    fn zero_cancer_blobs_means_no_cancer() {
        let spec = SyntheticSpec {
            blobs: [0, 2, 0, 1, 1, 1],
            ..Default::default()
        };
        let (_, gt) = render_synthetic(&spec, 3).unwrap();
        assert!(!gt.data.contains(&CARCINOMA));
        assert!(gt.data.contains(&STROMA));
    }

    #[test]
    fn refuses_to_overwrite() {
        let d = tempfile::tempdir().unwrap();
        generate_synthetic_slide(&small_spec(), 1, "s", d.path()).unwrap();
        assert!(generate_synthetic_slide(&small_spec(), 1, "s", d.path()).is_err());
    }

    /// Mean absolute horizontal gray-level difference over carcinoma pixels.
    fn cancer_texture(img: &RgbImage, gt: &GrayImage) -> f64 {
        let gray = img.to_gray();
        let (mut acc, mut n) = (0.0, 0usize);
        for y in 0..gt.height {
            for x in 0..gt.width - 1 {
                if gt.get(x, y) == CARCINOMA && gt.get(x + 1, y) == CARCINOMA {
                    acc += (gray.get(x, y) as f64 - gray.get(x + 1, y) as f64).abs();
                    n += 1;
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn mutation_texture_raises_cancer_texture_statistic() {
        for domain in [Domain::A, Domain::B] {
            let base = SyntheticSpec {
                domain,
                blobs: [2, 0, 0, 0, 0, 0],
                ..Default::default()
            };
            let (img0, gt0) = render_synthetic(&base, 11).unwrap();
            let (img1, gt1) = render_synthetic(
                &SyntheticSpec {
                    mutation_texture: true,
                    ..base
                },
                11,
            )
            .unwrap();
            assert_eq!(gt0, gt1, "the flag must not move regions");
            let (t0, t1) = (cancer_texture(&img0, &gt0), cancer_texture(&img1, &gt1));
            assert!(t1 > t0 * 1.2, "{domain:?}: {t1} vs {t0}");
        }
    }
}
