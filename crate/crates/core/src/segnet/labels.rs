use std::collections::BTreeMap;

use chrono::{DateTime, Utc};

use super::{is_valid_label, NUM_CLASSES, UNLABELED};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// Side of the square storage tiles of a [`LabelMap`].
pub const LABEL_TILE: u32 = 256;
const TILE_AREA: usize = (LABEL_TILE * LABEL_TILE) as usize;
const MAGIC: &[u8; 8] = b"DLBLMAP1";

/// Sparse per-pixel labels at 20×. Tiles without any label are not stored,
/// so the canonical encoding depends only on the labeled content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    tiles: BTreeMap<(u32, u32), Box<[u8]>>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            tiles: BTreeMap::new(),
        }
    }

    /// Dense class map to labels; every pixel must be a valid label.
    pub fn from_dense(img: &GrayImage) -> Result<Self> {
        let mut m = Self::new(img.width, img.height);
        m.merge(0, 0, img)?;
        Ok(m)
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        match self.tiles.get(&(y / LABEL_TILE, x / LABEL_TILE)) {
            Some(t) => t[((y % LABEL_TILE) * LABEL_TILE + x % LABEL_TILE) as usize],
            None => UNLABELED,
        }
    }

    /// Writes one pixel unconditionally (UNLABELED clears).
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        assert!(x < self.width && y < self.height, "({x}, {y}) outside label map");
        let key = (y / LABEL_TILE, x / LABEL_TILE);
        let idx = ((y % LABEL_TILE) * LABEL_TILE + x % LABEL_TILE) as usize;
        if v == UNLABELED {
            if let Some(t) = self.tiles.get_mut(&key) {
                t[idx] = UNLABELED;
                if t.iter().all(|&p| p == UNLABELED) {
                    self.tiles.remove(&key);
                }
            }
            return;
        }
        self.tiles
            .entry(key)
            .or_insert_with(|| vec![UNLABELED; TILE_AREA].into_boxed_slice())[idx] = v;
    }

    /// Overlays `delta` with its top-left corner at (x0, y0): labeled delta
    /// pixels override, UNLABELED ones leave the map untouched. Returns the
    /// number of pixels that changed value.
    pub fn merge(&mut self, x0: u32, y0: u32, delta: &GrayImage) -> Result<u64> {
        if x0 as u64 + delta.width as u64 > self.width as u64
            || y0 as u64 + delta.height as u64 > self.height as u64
        {
            return Err(Error::Validation(format!(
                "{}x{} delta at ({x0}, {y0}) exceeds {}x{} map",
                delta.width, delta.height, self.width, self.height
            )));
        }
        if let Some(bad) = delta.data.iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::Validation(format!("label value {bad} is not a class")));
        }
        let mut changed = 0;
        for dy in 0..delta.height {
            let row = &delta.data[(dy * delta.width) as usize..((dy + 1) * delta.width) as usize];
            for (dx, &v) in row.iter().enumerate() {
                if v != UNLABELED {
                    let (x, y) = (x0 + dx as u32, y0 + dy);
                    if self.get(x, y) != v {
                        self.set(x, y, v);
                        changed += 1;
                    }
                }
            }
        }
        Ok(changed)
    }

    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        // Edge tiles overhang the map; the overhang is never written.
        for t in self.tiles.values() {
            for &v in t.iter() {
                if v != UNLABELED {
                    counts[v as usize] += 1;
                }
            }
        }
        counts
    }

    pub fn labeled_count(&self) -> u64 {
        self.class_counts().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Window of labels; outside the map reads as UNLABELED.
    pub fn crop(&self, x: i64, y: i64, w: u32, h: u32) -> GrayImage {
        let mut out = GrayImage::filled(w, h, UNLABELED);
        for oy in 0..h {
            let sy = y + oy as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for ox in 0..w {
                let sx = x + ox as i64;
                if sx >= 0 && sx < self.width as i64 {
                    out.set(ox, oy, self.get(sx as u32, sy as u32));
                }
            }
        }
        out
    }

    /// Labeled pixels inside the window, without materializing it.
    pub fn labeled_in(&self, x: i64, y: i64, w: u32, h: u32) -> u64 {
        let t = LABEL_TILE as i64;
        let (x1, y1) = (x + w as i64, y + h as i64);
        let mut n = 0;
        for (&(tr, tc), tile) in &self.tiles {
            let (ty, tx) = (tr as i64 * t, tc as i64 * t);
            let (ax, ay) = (x.max(tx), y.max(ty));
            let (bx, by) = (x1.min(tx + t), y1.min(ty + t));
            for yy in ay..by {
                for xx in ax..bx {
                    if tile[((yy - ty) * t + (xx - tx)) as usize] != UNLABELED {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    pub fn to_dense(&self) -> GrayImage {
        self.crop(0, 0, self.width, self.height)
    }

    /// Canonical binary encoding: header, then the labeled tiles in
    /// (row, col) order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.tiles.len() * (8 + TILE_AREA));
        out.extend_from_slice(MAGIC);
        for v in [self.width, self.height, LABEL_TILE, self.tiles.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (&(r, c), t) in &self.tiles {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(t);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("label map: {m}"));
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("bad header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (width, height, tile, n) = (word(8), word(12), word(16), word(20) as usize);
        if tile != LABEL_TILE {
            return Err(bad("unsupported tile size"));
        }
        if bytes.len() != 24 + n * (8 + TILE_AREA) {
            return Err(bad("truncated"));
        }
        let mut m = Self::new(width, height);
        for i in 0..n {
            let off = 24 + i * (8 + TILE_AREA);
            let (r, c) = (word(off), word(off + 4));
            let t = &bytes[off + 8..off + 8 + TILE_AREA];
            if t.iter().any(|&v| !is_valid_label(v)) || t.iter().all(|&v| v == UNLABELED) {
                return Err(bad("invalid tile contents"));
            }
            if m.tiles.insert((r, c), t.to_vec().into_boxed_slice()).is_some() {
                return Err(bad("duplicate tile"));
            }
        }
        if m.encode() != bytes {
            return Err(bad("non-canonical encoding"));
        }
        Ok(m)
    }
}

/// Labels plus authorship for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAnnotation {
    pub slide_id: String,
    pub labels: LabelMap,
    pub author: String,
    pub created_at: DateTime<Utc>,
    pub iteration_index: u32,
}

impl PartialAnnotation {
    pub fn labeled_fraction(&self) -> f64 {
        let area = self.labels.width as u64 * self.labels.height as u64;
        if area == 0 {
            0.0
        } else {
            self.labels.labeled_count() as f64 / area as f64
        }
    }
}
