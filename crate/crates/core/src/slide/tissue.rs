//! Otsu tissue detection.

use std::path::Path;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::SlidePyramid;
use crate::error::{Error, Result};
use crate::raster::{self, GrayImage};

/// Default working magnification for tissue masking (base / 16 on a 20× scan).
pub const DEFAULT_TISSUE_MAGNIFICATION: f64 = 1.25;

/// Threshold maximizing between-class variance, where class 0 is `bins ≤ t`.
///
/// Candidates run from the lowest to the highest occupied bin; ties go to the
/// lowest threshold. Comparisons are exact: for a split with `w0` pixels and
/// intensity sum `s0` out of `W`/`S`, the variance is proportional to
/// `(S·w0 − s0·W)² / (w0·w1)`, compared by cross-multiplication.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let first = histogram.iter().position(|&c| c > 0);
    let last = histogram.iter().rposition(|&c| c > 0);
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::Degenerate("empty histogram".into()));
    };
    let total: u128 = histogram.iter().map(|&c| c as u128).sum();
    let sum: u128 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    let mut best_t = first;
    // Best variance as num/den; a single-class split has variance 0 (0/1).
    let mut best_num = BigUint::from(0u32);
    let mut best_den = BigUint::from(1u32);
    let (mut w0, mut s0) = (0u128, 0u128);
    for t in first..=last {
        w0 += histogram[t] as u128;
        s0 += t as u128 * histogram[t] as u128;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let a = sum * w0;
        let b = s0 * total;
        let diff = BigUint::from(a.abs_diff(b));
        let num = &diff * &diff;
        let den = BigUint::from(w0) * BigUint::from(w1);
        if &num * &best_den > &best_num * &den {
            best_num = num;
            best_den = den;
            best_t = t;
        }
    }
    Ok(best_t as u8)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TissueMaskMeta {
    pub slide_id: String,
    pub working_magnification: f64,
    pub threshold_used: u8,
    pub width: u32,
    pub height: u32,
}

/// Binary tissue map (1 = tissue) at a working magnification.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub slide_id: String,
    pub working_magnification: f64,
    pub threshold_used: u8,
    pub mask: GrayImage,
}

impl TissueMask {
    pub fn tissue_fraction(&self) -> f64 {
        let n = self.mask.data.len();
        if n == 0 {
            return 0.0;
        }
        self.mask.data.iter().filter(|&&v| v != 0).count() as f64 / n as f64
    }

    pub fn is_empty(&self) -> bool {
        self.mask.data.iter().all(|&v| v == 0)
    }

    /// Whether any tissue lies in the base-magnification rectangle.
    pub fn any_tissue_in(&self, base_mag: f64, x: i64, y: i64, w: u32, h: u32) -> bool {
        self.tissue_fraction_in(base_mag, x, y, w, h) > 0.0
    }

    /// Fraction of mask cells, among those overlapping the base-magnification
    /// rectangle, that are tissue.
    pub fn tissue_fraction_in(&self, base_mag: f64, x: i64, y: i64, w: u32, h: u32) -> f64 {
        let s = self.working_magnification / base_mag;
        let mx0 = ((x as f64) * s).floor().max(0.0) as i64;
        let my0 = ((y as f64) * s).floor().max(0.0) as i64;
        let mx1 = (((x + w as i64) as f64) * s).ceil().min(self.mask.width as f64) as i64;
        let my1 = (((y + h as i64) as f64) * s).ceil().min(self.mask.height as f64) as i64;
        if mx0 >= mx1 || my0 >= my1 {
            return 0.0;
        }
        let mut hits = 0u64;
        for my in my0..my1 {
            for mx in mx0..mx1 {
                hits += (self.mask.get(mx as u32, my as u32) != 0) as u64;
            }
        }
        hits as f64 / ((mx1 - mx0) * (my1 - my0)) as f64
    }

    /// Tissue membership of a base-magnification pixel.
    pub fn is_tissue_at(&self, base_mag: f64, x: u32, y: u32) -> bool {
        let s = self.working_magnification / base_mag;
        let mx = ((x as f64 + 0.5) * s) as u32;
        let my = ((y as f64 + 0.5) * s) as u32;
        mx < self.mask.width && my < self.mask.height && self.mask.get(mx, my) != 0
    }

    /// Writes `{stem}.png` (1-bit) and `{stem}.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        raster::write_atomic(
            &dir.join(format!("{stem}.png")),
            &raster::encode_bitmap_png(&self.mask)?,
        )?;
        raster::write_json(
            &dir.join(format!("{stem}.json")),
            &TissueMaskMeta {
                slide_id: self.slide_id.clone(),
                working_magnification: self.working_magnification,
                threshold_used: self.threshold_used,
                width: self.mask.width,
                height: self.mask.height,
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: TissueMaskMeta = raster::read_json(&dir.join(format!("{stem}.json")))?;
        let mask = raster::read_gray_png(&dir.join(format!("{stem}.png")))?;
        if (mask.width, mask.height) != (meta.width, meta.height) {
            return Err(Error::Format("tissue mask dimensions disagree with sidecar".into()));
        }
        Ok(Self {
            slide_id: meta.slide_id,
            working_magnification: meta.working_magnification,
            threshold_used: meta.threshold_used,
            mask,
        })
    }
}

/// Otsu tissue mask; pixels with luma ≤ threshold are tissue. A slide with no
/// contrast at all (a single gray level) yields an empty mask.
pub fn tissue_mask(slide: &SlidePyramid, working_magnification: f64) -> Result<TissueMask> {
    let (w, h) = slide.dims_at(working_magnification);
    let gray = slide
        .read_region(working_magnification, 0, 0, w, h)?
        .to_gray();
    let hist = gray.histogram();
    let threshold = otsu_threshold(&hist)?;
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    let data = if occupied < 2 {
        vec![0; gray.data.len()]
    } else {
        gray.data.iter().map(|&v| (v <= threshold) as u8).collect()
    };
    Ok(TissueMask {
        slide_id: slide.slide_id().to_string(),
        working_magnification,
        threshold_used: threshold,
        mask: GrayImage {
            width: w,
            height: h,
            data,
        },
    })
}
