//! Mutation-status prediction from segmented cancer regions.
//!
//! Cancer patches are cut on a non-overlapping 224×224 grid at 20×, 10× or
//! 5×, keeping a patch when strictly more than half of its pixels are
//! cancer. Training slides are capped per label; validation and test slides
//! are always scored on every patch. A slide's score is the mean of its
//! patch scores.

pub mod cohort;
mod resnet;
mod train;

pub use resnet::{ResNet18, ResNetConfig, NUM_OUTPUTS, PATCH_SIZE};
pub use train::{
    evaluate_cohort, load_slide_patches, predict_patch, score_slide, select_by_auc, train_classifier, ClfCheckpoint,
    ClfEpoch, ClfMeta, ClfModel, ClfTrainConfig, CohortReport, CohortRow, EvalSplit, SlidePatches, CLF_LR,
};

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, GrayImage};
use crate::slide::SlidePyramid;

pub const PATCH_SET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "20x")]
    X20,
    #[serde(rename = "10x")]
    X10,
    #[serde(rename = "5x")]
    X5,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X20, Magnification::X10, Magnification::X5];

    pub fn value(self) -> f64 {
        match self {
            Magnification::X20 => 20.0,
            Magnification::X10 => 10.0,
            Magnification::X5 => 5.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().trim_end_matches(['x', 'X']) {
            "20" => Ok(Magnification::X20),
            "10" => Ok(Magnification::X10),
            "5" => Ok(Magnification::X5),
            _ => Err(Error::Validation(format!("magnification {s} is not one of 20x, 10x, 5x"))),
        }
    }
}

impl std::fmt::Display for Magnification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x", self.value())
    }
}

/// Slide label. The class index doubles as the classifier output index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationStatus {
    NonBrca,
    Brca,
}

impl MutationStatus {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_brca(self) -> bool {
        self == MutationStatus::Brca
    }
}

/// Per-slide patch caps applied to training slides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchCaps {
    pub brca: usize,
    pub non_brca: usize,
}

impl Default for PatchCaps {
    fn default() -> Self {
        Self {
            brca: 5000,
            non_brca: 1000,
        }
    }
}

impl PatchCaps {
    pub fn cap(&self, label: MutationStatus) -> usize {
        match label {
            MutationStatus::Brca => self.brca,
            MutationStatus::NonBrca => self.non_brca,
        }
    }
}

/// Cancer patches of one slide at one magnification. Origins are top-left
/// corners in that magnification's pixel frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CancerPatchSet {
    pub slide_id: String,
    pub magnification: Magnification,
    pub patch_size: u32,
    pub label: MutationStatus,
    pub subsampled: bool,
    pub seed: Option<u64>,
    pub patches: Vec<(u32, u32)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetHeader {
    schema_version: u32,
    slide_id: String,
    magnification: Magnification,
    patch_size: u32,
    label: MutationStatus,
    subsampled: bool,
    seed: Option<u64>,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchLine {
    x: u32,
    y: u32,
}

impl CancerPatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Header line, then one line per patch.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let header = SetHeader {
            schema_version: PATCH_SET_SCHEMA_VERSION,
            slide_id: self.slide_id.clone(),
            magnification: self.magnification,
            patch_size: self.patch_size,
            label: self.label,
            subsampled: self.subsampled,
            seed: self.seed,
            count: self.patches.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for &(x, y) in &self.patches {
            serde_json::to_writer(&mut out, &PatchLine { x, y })?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("patch set: {e}")))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: SetHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::Format("patch set without header".into()))?,
        )?;
        if header.schema_version != PATCH_SET_SCHEMA_VERSION {
            return Err(Error::Format(format!("patch set schema {} unsupported", header.schema_version)));
        }
        let patches = lines
            .map(|l| serde_json::from_str::<PatchLine>(l).map(|p| (p.x, p.y)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if patches.len() != header.count {
            return Err(Error::Format(format!(
                "patch set declares {} patches but holds {}",
                header.count,
                patches.len()
            )));
        }
        Ok(Self {
            slide_id: header.slide_id,
            magnification: header.magnification,
            patch_size: header.patch_size,
            label: header.label,
            subsampled: header.subsampled,
            seed: header.seed,
            patches,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        raster::write_atomic(path, &self.to_jsonl()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&bytes)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let bytes = self.to_jsonl()?;
        w.write_all(&bytes).map_err(|e| Error::io("<stream>", e))
    }
}

/// Origins of grid patches at `magnification` whose footprint is more than
/// half cancer. `mask` is binary (1 = cancer) at `mask_magnification`; a
/// patch pixel `X` reads mask column `floor((X + 0.5) · s)` with
/// `s = mask_magnification / magnification`. Only complete grid cells are
/// considered. Row-major order.
pub fn cancer_patch_origins(
    mask: &GrayImage,
    mask_magnification: f64,
    magnification: f64,
    patch: u32,
) -> Result<Vec<(u32, u32)>> {
    if !(magnification > 0.0) || magnification > mask_magnification + 1e-9 {
        return Err(Error::UnsupportedMagnification {
            requested: magnification,
            base: mask_magnification,
        });
    }
    if patch == 0 {
        return Err(Error::Validation("patch size must be positive".into()));
    }
    if let Some(v) = mask.data.iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("mask value {v} is not binary")));
    }
    let s = mask_magnification / magnification;
    let gw = (mask.width as f64 / s + 1e-9).floor() as u32;
    let gh = (mask.height as f64 / s + 1e-9).floor() as u32;
    let index = |n: u32, limit: u32| -> Vec<u32> {
        (0..n)
            .map(|x| (((x as f64 + 0.5) * s).floor() as u32).min(limit - 1))
            .collect()
    };
    let xs = index(gw, mask.width.max(1));
    let ys = index(gh, mask.height.max(1));
    let threshold = (patch as u64 * patch as u64) / 2;
    let mut out = Vec::new();
    for row in 0..gh / patch {
        for col in 0..gw / patch {
            let (x0, y0) = (col * patch, row * patch);
            let mut count = 0u64;
            for &my in &ys[y0 as usize..(y0 + patch) as usize] {
                let line = &mask.data[(my * mask.width) as usize..((my + 1) * mask.width) as usize];
                for &mx in &xs[x0 as usize..(x0 + patch) as usize] {
                    count += line[mx as usize] as u64;
                }
            }
            if count > threshold {
                out.push((x0, y0));
            }
        }
    }
    Ok(out)
}

/// Cancer patches of `slide` at `magnification` under a binary mask at the
/// slide's base magnification.
pub fn extract_cancer_patches(
    slide: &SlidePyramid,
    mask: &GrayImage,
    magnification: Magnification,
    label: MutationStatus,
) -> Result<CancerPatchSet> {
    if (mask.width, mask.height) != slide.dims() {
        return Err(Error::Validation(format!(
            "mask is {}x{} but slide {} is {:?}",
            mask.width,
            mask.height,
            slide.slide_id(),
            slide.dims()
        )));
    }
    let patches = cancer_patch_origins(mask, slide.base_magnification(), magnification.value(), PATCH_SIZE as u32)?;
    Ok(CancerPatchSet {
        slide_id: slide.slide_id().to_string(),
        magnification,
        patch_size: PATCH_SIZE as u32,
        label,
        subsampled: false,
        seed: None,
        patches,
    })
}

/// Seeded uniform subset without replacement when the set exceeds its
/// label's cap, keeping the original order. Sets under the cap are returned
/// unchanged apart from the provenance fields.
pub fn subsample(set: &CancerPatchSet, caps: &PatchCaps, seed: u64) -> CancerPatchSet {
    let cap = caps.cap(set.label);
    let mut out = CancerPatchSet {
        subsampled: true,
        seed: Some(seed),
        ..set.clone()
    };
    if set.patches.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, set.patches.len(), cap).into_vec();
        keep.sort_unstable();
        out.patches = keep.into_iter().map(|i| set.patches[i]).collect();
    }
    out
}

/// Slide-level probability: the mean of the patch scores, absent
/// (unscorable) when the slide has no cancer patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub magnification: Magnification,
    pub p_slide: Option<f64>,
    pub n: usize,
}

impl SlideScore {
    pub fn is_scorable(&self) -> bool {
        self.p_slide.is_some()
    }
}

/// Compensated (Neumaier) mean of `scores`, clamped to their range.
pub fn mean_score(scores: &[f64]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &s in scores {
        let t = sum + s;
        if sum.abs() >= s.abs() {
            comp += (sum - t) + s;
        } else {
            comp += (s - t) + sum;
        }
        sum = t;
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(((sum + comp) / scores.len() as f64).clamp(lo, hi))
}

pub fn aggregate_slide(slide_id: &str, magnification: Magnification, scores: &[f64]) -> Result<SlideScore> {
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Validation(format!("patch score {s} outside [0, 1]")));
    }
    let p_slide = mean_score(scores);
    if p_slide.is_none() {
        log::warn!("slide {slide_id} has no cancer patches at {magnification}; it is unscorable");
    }
    Ok(SlideScore {
        slide_id: slide_id.to_string(),
        magnification,
        p_slide,
        n: scores.len(),
    })
}

/// Loss weights `w_c = 1 − N_c / N_t` over training patch counts, indexed
/// by [`MutationStatus::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchClassWeights {
    pub w: [f64; 2],
    pub counts: [u64; 2],
}

impl PatchClassWeights {
    pub fn from_counts(counts: [u64; 2]) -> Result<Self> {
        let total = counts[0] + counts[1];
        if counts.contains(&0) {
            return Err(Error::Degenerate(format!(
                "training patches cover a single class (counts {counts:?})"
            )));
        }
        Ok(Self {
            w: counts.map(|n| 1.0 - n as f64 / total as f64),
            counts,
        })
    }
}

#[cfg(test)]
mod tests;
