use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::model::{Dmmn, PatchBatch};
use super::train::argmax_maps;
use super::{BACKGROUND, CARCINOMA, CLASS_ALPHA, CLASS_NAMES, CLASS_PALETTE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::softmax_last;
use crate::patch::{extract_multimag_sized, MultiMagPatch};
use crate::raster::{self, GrayImage};
use crate::slide::{SlidePyramid, TissueMask};

/// Magnification of segmentation outputs.
const OUTPUT_MAG: f64 = 20.0;
const INFER_BATCH: usize = 8;
pub const MASK_SCHEMA_VERSION: u32 = 1;

/// Per-pixel class probabilities, channel-major `(C, H, W)`.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub width: u32,
    pub height: u32,
    pub probs: Vec<f32>,
}

impl ScoreMap {
    pub fn prob(&self, class: usize, x: u32, y: u32) -> f32 {
        self.probs[class * (self.width * self.height) as usize + (y * self.width + x) as usize]
    }

    pub fn argmax(&self) -> GrayImage {
        let plane = (self.width * self.height) as usize;
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for k in 1..NUM_CLASSES {
                    if self.probs[k * plane + p] > self.probs[best * plane + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Softmax class probabilities for one concentric patch.
pub fn seg_forward(model: &Dmmn, patch: &MultiMagPatch) -> Result<ScoreMap> {
    let batch = PatchBatch::from_images(&[patch.as_refs()], DType::F32)?;
    let logits = model.forward(&batch, false)?;
    let (_, c, h, w) = logits.dims4()?;
    let probs = softmax_last(&logits.squeeze(0)?.permute((1, 2, 0))?)?
        .permute((2, 0, 1))?
        .flatten_all()?
        .to_vec1::<f32>()?;
    debug_assert_eq!(probs.len(), c * h * w);
    Ok(ScoreMap {
        width: w as u32,
        height: h as u32,
        probs,
    })
}

/// Class map of a whole slide at 20×.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub slide_id: String,
    pub model_tag: String,
    pub classes: GrayImage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskSidecar {
    schema_version: u32,
    slide_id: String,
    model_tag: String,
    magnification: f64,
    width: u32,
    height: u32,
    tile_size: u32,
    palette: Vec<PaletteEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PaletteEntry {
    class: u8,
    name: String,
    rgb: [u8; 3],
    alpha: u8,
}

impl SegmentationMask {
    /// Nearest-neighbour view of the mask at pyramid level `level` (each
    /// level halves the resolution), restricted to one `tile_size` tile.
    pub fn level_tile(&self, level: u32, row: u32, col: u32, tile_size: u32) -> GrayImage {
        let f = 1u64 << level;
        let (w, h) = (self.classes.width as u64, self.classes.height as u64);
        let (lw, lh) = (w.div_ceil(f), h.div_ceil(f));
        let x0 = col as u64 * tile_size as u64;
        let y0 = row as u64 * tile_size as u64;
        let tw = (lw.saturating_sub(x0)).min(tile_size as u64) as u32;
        let th = (lh.saturating_sub(y0)).min(tile_size as u64) as u32;
        let mut out = GrayImage::filled(tw, th, BACKGROUND);
        for ty in 0..th {
            let sy = ((y0 + ty as u64) * f + f / 2).min(h - 1) as u32;
            for tx in 0..tw {
                let sx = ((x0 + tx as u64) * f + f / 2).min(w - 1) as u32;
                out.set(tx, ty, self.classes.get(sx, sy));
            }
        }
        out
    }

    pub fn encode_tile(tile: &GrayImage) -> Result<Vec<u8>> {
        raster::encode_indexed_png(tile, &CLASS_PALETTE, &CLASS_ALPHA)
    }

    /// Indexed-colour PNG tiles plus `mask.json`.
    pub fn save(&self, dir: &Path, tile_size: u32) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows = self.classes.height.div_ceil(tile_size);
        let cols = self.classes.width.div_ceil(tile_size);
        for r in 0..rows {
            for c in 0..cols {
                let tile = self.level_tile(0, r, c, tile_size);
                raster::write_atomic(&dir.join(format!("tile_{r}_{c}.png")), &Self::encode_tile(&tile)?)?;
            }
        }
        let sidecar = MaskSidecar {
            schema_version: MASK_SCHEMA_VERSION,
            slide_id: self.slide_id.clone(),
            model_tag: self.model_tag.clone(),
            magnification: OUTPUT_MAG,
            width: self.classes.width,
            height: self.classes.height,
            tile_size,
            palette: (0..NUM_CLASSES)
                .map(|c| PaletteEntry {
                    class: c as u8,
                    name: CLASS_NAMES[c].into(),
                    rgb: CLASS_PALETTE[c],
                    alpha: CLASS_ALPHA[c],
                })
                .collect(),
        };
        raster::write_json(&dir.join("mask.json"), &sidecar)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("mask.json");
        if !path.is_file() {
            return Err(Error::NotFound(format!("segmentation {}", dir.display())));
        }
        let s: MaskSidecar = raster::read_json(&path)?;
        if s.schema_version != MASK_SCHEMA_VERSION || s.tile_size == 0 {
            return Err(Error::Format(format!("{}: unsupported mask sidecar", dir.display())));
        }
        let mut classes = GrayImage::filled(s.width, s.height, BACKGROUND);
        for r in 0..s.height.div_ceil(s.tile_size) {
            for c in 0..s.width.div_ceil(s.tile_size) {
                let tile = raster::read_gray_png(&dir.join(format!("tile_{r}_{c}.png")))?;
                for y in 0..tile.height {
                    for x in 0..tile.width {
                        let v = tile.get(x, y);
                        if v as usize >= NUM_CLASSES {
                            return Err(Error::Format(format!("class index {v} in mask tile")));
                        }
                        classes.set(c * s.tile_size + x, r * s.tile_size + y, v);
                    }
                }
            }
        }
        Ok(Self {
            slide_id: s.slide_id,
            model_tag: s.model_tag,
            classes,
        })
    }
}

/// Segments every non-overlapping output patch that touches tissue; pixels
/// outside the tissue mask are background.
pub fn segment_slide(model: &Dmmn, model_tag: &str, slide: &SlidePyramid, mask: &TissueMask) -> Result<SegmentationMask> {
    let (w, h) = slide.dims_at(OUTPUT_MAG);
    let p = model.config().patch as u32;
    let scale = slide.base_magnification() / OUTPUT_MAG;
    let mut classes = GrayImage::filled(w, h, BACKGROUND);
    let mut cells = Vec::new();
    for y in (0..h).step_by(p as usize) {
        for x in (0..w).step_by(p as usize) {
            if mask.any_tissue_in(OUTPUT_MAG, x as i64, y as i64, p, p) {
                cells.push((x, y));
            }
        }
    }
    for chunk in cells.chunks(INFER_BATCH) {
        let patches: Vec<MultiMagPatch> = chunk
            .iter()
            .map(|&(x, y)| {
                let center = (
                    ((x + p / 2) as f64 * scale).round() as i64,
                    ((y + p / 2) as f64 * scale).round() as i64,
                );
                extract_multimag_sized(slide, center, p)
            })
            .collect::<Result<_>>()?;
        let triples: Vec<_> = patches.iter().map(|m| m.as_refs()).collect();
        let logits = model.forward(&PatchBatch::from_images(&triples, DType::F32)?, false)?;
        for (pred, &(x0, y0)) in argmax_maps(&logits)?.iter().zip(chunk) {
            for dy in 0..p.min(h - y0) {
                for dx in 0..p.min(w - x0) {
                    let (x, y) = (x0 + dx, y0 + dy);
                    if mask.is_tissue_at(OUTPUT_MAG, x, y) {
                        classes.set(x, y, pred.get(dx, dy));
                    }
                }
            }
        }
    }
    Ok(SegmentationMask {
        slide_id: slide.slide_id().to_string(),
        model_tag: model_tag.to_string(),
        classes,
    })
}

/// Carcinoma → 1, every other class → 0.
pub fn to_binary(classes: &GrayImage) -> GrayImage {
    GrayImage {
        width: classes.width,
        height: classes.height,
        data: classes.data.iter().map(|&c| (c == CARCINOMA) as u8).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RgbImage;
    use crate::segnet::{DmmnConfig, STROMA};
    use crate::slide::{tissue_mask, MemorySource};

    fn tiny() -> Dmmn {
        Dmmn::new(
            &DmmnConfig {
                width: 2,
                patch: 64,
                batch_norm: true,
            },
            DType::F32,
            1,
        )
        .unwrap()
    }

    #[test]
    fn probabilities_sum_to_one_and_repeat() {
        let slide = MemorySource::new("s", RgbImage::filled(512, 512, [180, 90, 150]), 20.0, 256).into_pyramid();
        let patch = extract_multimag_sized(&slide, (200, 200), 64).unwrap();
        let net = tiny();
        let a = seg_forward(&net, &patch).unwrap();
        let b = seg_forward(&net, &patch).unwrap();
        assert_eq!(a.probs, b.probs);
        for y in 0..64 {
            for x in 0..64 {
                let s: f32 = (0..NUM_CLASSES).map(|c| a.prob(c, x, y)).sum();
                assert!((s - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn blank_slide_is_all_background() {
        let slide = MemorySource::new("blank", RgbImage::white(300, 200), 20.0, 256).into_pyramid();
        let mask = tissue_mask(&slide, 1.25).unwrap();
        let seg = segment_slide(&tiny(), "M0", &slide, &mask).unwrap();
        assert_eq!((seg.classes.width, seg.classes.height), (300, 200));
        assert!(seg.classes.data.iter().all(|&c| c == BACKGROUND));
    }

    #[test]
    fn binary_conversion() {
        let all_c = GrayImage::filled(5, 4, CARCINOMA);
        assert!(to_binary(&all_c).data.iter().all(|&v| v == 1));
        let all_s = GrayImage::filled(5, 4, STROMA);
        assert!(to_binary(&all_s).data.iter().all(|&v| v == 0));
        let mixed = GrayImage {
            width: 6,
            height: 1,
            data: vec![0, 1, 2, 0, 5, 0],
        };
        let b = to_binary(&mixed);
        assert_eq!(b.data.iter().filter(|&&v| v == 1).count(), 3);
        assert_eq!(b.data.iter().filter(|&&v| v == 0).count() + 3, 6);
        // Re-expressing the binary map as classes and converting again is a no-op.
        let as_classes = GrayImage {
            data: b.data.iter().map(|&v| if v == 1 { CARCINOMA } else { STROMA }).collect(),
            ..b.clone()
        };
        assert_eq!(to_binary(&as_classes), b);
    }

    #[test]
    fn mask_persistence_round_trips() {
        let mut classes = GrayImage::filled(700, 300, BACKGROUND);
        for x in 100..600 {
            classes.set(x, 150, (x % 6) as u8);
        }
        let m = SegmentationMask {
            slide_id: "s".into(),
            model_tag: "M2".into(),
            classes,
        };
        let d = tempfile::tempdir().unwrap();
        m.save(d.path(), 256).unwrap();
        assert_eq!(SegmentationMask::load(d.path()).unwrap(), m);
        let t = m.level_tile(1, 0, 1, 256);
        assert_eq!((t.width, t.height), (94, 150));
    }
}
