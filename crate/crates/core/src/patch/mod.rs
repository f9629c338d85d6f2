//! Concentric multi-magnification patches, training grids, case splits and
//! augmentation.

mod augment;
mod manifest;

pub use augment::{augment, AugmentKind, AugmentPolicy, ColorJitter, Transform};
pub use manifest::{
    enumerate_grid, split_cases, CaseRecord, ManifestEntry, PatchManifest, Split, SplitRatios, MANIFEST_SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::RgbImage;
use crate::slide::SlidePyramid;

/// Side of every network input patch.
pub const PATCH_SIZE: u32 = 256;
/// Input magnifications, finest first.
pub const MAGNIFICATIONS: [f64; 3] = [20.0, 10.0, 5.0];

/// Three `256 × 256` views centred on one point: 20× (256 base px at a 20×
/// base), 10× (512) and 5× (1024).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiMagPatch {
    pub slide_id: String,
    /// Centre in base-magnification pixels.
    pub center: (i64, i64),
    /// 20×, 10×, 5×.
    pub images: [RgbImage; 3],
}

impl MultiMagPatch {
    pub fn as_refs(&self) -> [&RgbImage; 3] {
        [&self.images[0], &self.images[1], &self.images[2]]
    }
}

/// Top-left corner, in the frame of `magnification`, of a `size` patch
/// centred on base pixel `center`.
pub fn patch_origin(base_magnification: f64, magnification: f64, center: (i64, i64), size: u32) -> (i64, i64) {
    let s = magnification / base_magnification;
    let half = size as i64 / 2;
    (
        (center.0 as f64 * s).floor() as i64 - half,
        (center.1 as f64 * s).floor() as i64 - half,
    )
}

/// Reads the three concentric patches. Edge centres are allowed; the
/// uncovered area is white.
pub fn extract_multimag(slide: &SlidePyramid, center: (i64, i64)) -> Result<MultiMagPatch> {
    extract_multimag_sized(slide, center, PATCH_SIZE)
}

pub fn extract_multimag_sized(slide: &SlidePyramid, center: (i64, i64), size: u32) -> Result<MultiMagPatch> {
    let base = slide.base_magnification();
    let read = |m: f64| {
        let (x, y) = patch_origin(base, m, center, size);
        slide.read_region(m, x, y, size, size)
    };
    Ok(MultiMagPatch {
        slide_id: slide.slide_id().to_string(),
        center,
        images: [read(MAGNIFICATIONS[0])?, read(MAGNIFICATIONS[1])?, read(MAGNIFICATIONS[2])?],
    })
}

/// Strategy used when a training grid is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_stride")]
    pub stride: u32,
    /// A cell is kept when its tissue fraction is strictly above this.
    #[serde(default)]
    pub min_tissue_fraction: f64,
}

fn default_stride() -> u32 {
    PATCH_SIZE
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            stride: PATCH_SIZE,
            min_tissue_fraction: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{block_average, MemorySource};

    /// Smooth diagonal ramp; slope well under one gray level per pixel.
    fn ramp(n: u32) -> RgbImage {
        let mut img = RgbImage::white(n, n);
        for y in 0..n {
            for x in 0..n {
                let v = 40 + ((x + y) as f64 * 0.03) as u8;
                img.put(x, y, [v, v / 2 + 60, 255 - v]);
            }
        }
        img
    }

    #[test]
    fn uniform_slide_gives_uniform_patches() {
        let slide = MemorySource::new("u", RgbImage::filled(3072, 3072, [120, 60, 90]), 20.0, 512).into_pyramid();
        let p = extract_multimag(&slide, (1536, 1536)).unwrap();
        for img in &p.images {
            assert_eq!((img.width, img.height), (256, 256));
            assert!(img.data.chunks(3).all(|px| px == [120, 60, 90]));
        }
    }

    #[test]
    fn origin_centre_is_three_quarters_white() {
        let slide = MemorySource::new("u", RgbImage::filled(2048, 2048, [10, 10, 10]), 20.0, 512).into_pyramid();
        let p = extract_multimag(&slide, (0, 0)).unwrap();
        let white = p.images[0].data.chunks(3).filter(|px| *px == [255, 255, 255]).count();
        assert_eq!(white, 256 * 256 * 3 / 4);
    }

    #[test]
    fn five_x_is_block_average_of_base_read() {
        let img = ramp(2048);
        let slide = MemorySource::new("r", img.clone(), 20.0, 512).into_pyramid();
        for center in [(1024, 1024), (700, 1300), (100, 40)] {
            let p = extract_multimag(&slide, center).unwrap();
            let base = img.crop_padded(center.0 - 512, center.1 - 512, 1024, 1024);
            assert_eq!(p.images[2], block_average(&base, 4), "centre {center:?}");
        }
    }

    fn rms(a: &RgbImage, b: &RgbImage) -> f64 {
        let s: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        (s / a.data.len() as f64).sqrt()
    }

    fn center_up(img: &RgbImage, k: u32) -> RgbImage {
        let n = img.width / k;
        let off = (img.width - n) / 2;
        let mut out = RgbImage::white(img.width, img.height);
        for y in 0..img.height {
            for x in 0..img.width {
                out.put(x, y, img.pixel(off + x / k, off + y / k));
            }
        }
        out
    }

    #[test]
    fn concentric_views_agree() {
        let slide = MemorySource::new("r", ramp(3072), 20.0, 512).into_pyramid();
        for center in [(1536, 1536), (1000, 2100)] {
            let p = extract_multimag(&slide, center).unwrap();
            assert!(rms(&center_up(&p.images[1], 2), &p.images[0]) <= 1.0);
            assert!(rms(&center_up(&p.images[2], 2), &p.images[1]) <= 1.0);
            assert!(rms(&center_up(&p.images[2], 4), &p.images[0]) <= 1.0);
        }
    }
}
