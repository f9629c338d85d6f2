//! Pyramidal slide access.
//!
//! A slide is stored as a Pyramid Directory: `slide.json` plus
//! `level_{k}/tile_{row}_{col}.png`. Level `k + 1` halves level `k` (ceil),
//! and every stored level is the area average of level 0 over `2^k` blocks,
//! so reading a stored level equals block-averaging a base read.
//!
//! Other formats plug in through [`TileSource`].

mod synth;
mod tissue;

pub use synth::{generate_synthetic_slide, Appearance, Domain, SyntheticSlide, SyntheticSpec};
pub use tissue::{otsu_threshold, tissue_mask, TissueMask, DEFAULT_TISSUE_MAGNIFICATION};

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, RgbImage};

pub const SLIDE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const DEFAULT_BASE_MAGNIFICATION: f64 = 20.0;
const MAG_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub level: u32,
    pub magnification: f64,
    pub width: u32,
    pub height: u32,
    pub cols: u32,
    pub rows: u32,
}

/// Contents of `slide.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideMeta {
    pub schema_version: u32,
    pub slide_id: String,
    pub base_magnification: f64,
    #[serde(default)]
    pub mpp: Option<f64>,
    pub tile_size: u32,
    pub levels: Vec<LevelInfo>,
}

impl SlideMeta {
    /// Level table for a base image, halving until both sides fit one tile.
    pub fn for_base(
        slide_id: &str,
        width: u32,
        height: u32,
        base_magnification: f64,
        tile_size: u32,
        mpp: Option<f64>,
    ) -> Self {
        let mut levels = Vec::new();
        let (mut w, mut h, mut mag) = (width, height, base_magnification);
        for level in 0.. {
            levels.push(LevelInfo {
                level,
                magnification: mag,
                width: w,
                height: h,
                cols: w.div_ceil(tile_size),
                rows: h.div_ceil(tile_size),
            });
            if w <= tile_size && h <= tile_size {
                break;
            }
            w = w.div_ceil(2);
            h = h.div_ceil(2);
            mag /= 2.0;
        }
        Self {
            schema_version: SLIDE_SCHEMA_VERSION,
            slide_id: slide_id.to_string(),
            base_magnification,
            mpp,
            tile_size,
            levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SLIDE_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported slide schema_version {}",
                self.schema_version
            )));
        }
        if self.levels.is_empty() {
            return Err(Error::Format("slide has no level-0 metadata".into()));
        }
        if !(self.base_magnification > 0.0) || self.tile_size == 0 {
            return Err(Error::Format(
                "base_magnification and tile_size must be positive".into(),
            ));
        }
        let l0 = &self.levels[0];
        if l0.level != 0 || (l0.magnification - self.base_magnification).abs() > MAG_EPS {
            return Err(Error::Invariant(
                "level 0 must sit at the base magnification".into(),
            ));
        }
        for (k, lv) in self.levels.iter().enumerate() {
            if lv.level as usize != k {
                return Err(Error::Invariant(format!("level {k} listed out of order")));
            }
            if lv.cols != lv.width.div_ceil(self.tile_size)
                || lv.rows != lv.height.div_ceil(self.tile_size)
            {
                return Err(Error::Invariant(format!("level {k} tile grid mismatch")));
            }
            if k > 0 {
                let prev = &self.levels[k - 1];
                if lv.width != prev.width.div_ceil(2) || lv.height != prev.height.div_ceil(2) {
                    return Err(Error::Invariant(format!(
                        "level {k} is {}x{}, expected half of level {}",
                        lv.width,
                        lv.height,
                        k - 1
                    )));
                }
                if (lv.magnification * 2.0 - prev.magnification).abs() > MAG_EPS {
                    return Err(Error::Invariant(format!(
                        "level {k} magnification must halve the previous level"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pixel dimensions of the whole slide in the frame of `magnification`.
    pub fn dims_at(&self, magnification: f64) -> (u32, u32) {
        if let Some(lv) = self
            .levels
            .iter()
            .find(|l| (l.magnification - magnification).abs() < MAG_EPS)
        {
            return (lv.width, lv.height);
        }
        let s = magnification / self.base_magnification;
        let l0 = &self.levels[0];
        (
            (l0.width as f64 * s - MAG_EPS).ceil().max(1.0) as u32,
            (l0.height as f64 * s - MAG_EPS).ceil().max(1.0) as u32,
        )
    }
}

/// Tile storage backend. Implementations must be thread-safe; a slide handle
/// is shared across concurrent readers.
pub trait TileSource: Send + Sync {
    fn meta(&self) -> &SlideMeta;
    /// Returns the tile at (level, row, col), cropped to the level extent.
    fn read_tile(&self, level: u32, row: u32, col: u32) -> Result<RgbImage>;
}

/// Reader for the Pyramid Directory Format.
pub struct DirectorySource {
    root: PathBuf,
    meta: SlideMeta,
}

impl DirectorySource {
    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join("slide.json");
        if !meta_path.is_file() {
            return Err(Error::Format(format!(
                "{}: missing slide.json",
                root.display()
            )));
        }
        let meta: SlideMeta = raster::read_json(&meta_path)?;
        meta.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            meta,
        })
    }

    pub fn tile_path(root: &Path, level: u32, row: u32, col: u32) -> PathBuf {
        root.join(format!("level_{level}"))
            .join(format!("tile_{row}_{col}.png"))
    }
}

impl TileSource for DirectorySource {
    fn meta(&self) -> &SlideMeta {
        &self.meta
    }

    fn read_tile(&self, level: u32, row: u32, col: u32) -> Result<RgbImage> {
        let img = raster::read_rgb_png(&Self::tile_path(&self.root, level, row, col))?;
        let (w, h) = tile_extent(&self.meta, level, row, col)?;
        if img.width != w || img.height != h {
            return Err(Error::Format(format!(
                "tile {level}/{row}/{col} is {}x{}, expected {w}x{h}",
                img.width, img.height
            )));
        }
        Ok(img)
    }
}

/// A single flat RGB image exposed as a one-level pyramid. The pixels are
/// decoded on first access.
pub struct PlainImageSource {
    path: PathBuf,
    meta: SlideMeta,
    image: Mutex<Option<Arc<RgbImage>>>,
}

impl PlainImageSource {
    pub fn open(path: &Path, magnification: f64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let reader = decoder.read_info()?;
        let info = reader.info();
        let slide_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("slide")
            .to_string();
        let (w, h) = (info.width, info.height);
        let mut meta = SlideMeta::for_base(&slide_id, w, h, magnification, w.max(h), None);
        meta.levels.truncate(1);
        Ok(Self {
            path: path.to_path_buf(),
            meta,
            image: Mutex::new(None),
        })
    }
}

impl TileSource for PlainImageSource {
    fn meta(&self) -> &SlideMeta {
        &self.meta
    }

    fn read_tile(&self, level: u32, row: u32, col: u32) -> Result<RgbImage> {
        if level != 0 || row != 0 || col != 0 {
            return Err(Error::NotFound(format!("tile {level}/{row}/{col}")));
        }
        let mut guard = self.image.lock();
        if guard.is_none() {
            *guard = Some(Arc::new(raster::read_rgb_png(&self.path)?));
        }
        Ok(guard.as_ref().unwrap().as_ref().clone())
    }
}

fn tile_extent(meta: &SlideMeta, level: u32, row: u32, col: u32) -> Result<(u32, u32)> {
    let lv = meta
        .levels
        .get(level as usize)
        .ok_or_else(|| Error::NotFound(format!("level {level}")))?;
    if row >= lv.rows || col >= lv.cols {
        return Err(Error::NotFound(format!("tile {level}/{row}/{col}")));
    }
    let ts = meta.tile_size;
    Ok((
        (lv.width - col * ts).min(ts),
        (lv.height - row * ts).min(ts),
    ))
}

struct TileCache {
    capacity: usize,
    map: HashMap<(u32, u32, u32), Arc<RgbImage>>,
    order: VecDeque<(u32, u32, u32)>,
}

impl TileCache {
    fn get(&self, key: &(u32, u32, u32)) -> Option<Arc<RgbImage>> {
        self.map.get(key).cloned()
    }

    fn insert(&mut self, key: (u32, u32, u32), tile: Arc<RgbImage>) {
        if self.map.insert(key, tile).is_none() {
            self.order.push_back(key);
            while self.order.len() > self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.map.remove(&old);
                }
            }
        }
    }
}

/// Immutable handle on a pyramidal slide. Cloning is cheap and clones share
/// the tile cache.
#[derive(Clone)]
pub struct SlidePyramid {
    source: Arc<dyn TileSource>,
    cache: Arc<Mutex<TileCache>>,
}

impl std::fmt::Debug for SlidePyramid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlidePyramid")
            .field("slide_id", &self.meta().slide_id)
            .field("levels", &self.meta().levels.len())
            .finish()
    }
}

/// Opens a Pyramid Directory, or a plain PNG declared at 20×.
pub fn open_slide(path: &Path) -> Result<SlidePyramid> {
    open_slide_at(path, DEFAULT_BASE_MAGNIFICATION)
}

/// Like [`open_slide`], with the magnification declared for plain images.
pub fn open_slide_at(path: &Path, plain_magnification: f64) -> Result<SlidePyramid> {
    if path.is_dir() {
        Ok(SlidePyramid::from_source(Arc::new(DirectorySource::open(
            path,
        )?)))
    } else if path.is_file() {
        Ok(SlidePyramid::from_source(Arc::new(
            PlainImageSource::open(path, plain_magnification)?,
        )))
    } else {
        Err(Error::Format(format!(
            "{}: neither a slide directory nor an image",
            path.display()
        )))
    }
}

impl SlidePyramid {
    pub fn from_source(source: Arc<dyn TileSource>) -> Self {
        Self {
            source,
            cache: Arc::new(Mutex::new(TileCache {
                capacity: 64,
                map: HashMap::new(),
                order: VecDeque::new(),
            })),
        }
    }

    pub fn meta(&self) -> &SlideMeta {
        self.source.meta()
    }

    pub fn slide_id(&self) -> &str {
        &self.meta().slide_id
    }

    pub fn base_magnification(&self) -> f64 {
        self.meta().base_magnification
    }

    pub fn dims(&self) -> (u32, u32) {
        let l0 = &self.meta().levels[0];
        (l0.width, l0.height)
    }

    pub fn dims_at(&self, magnification: f64) -> (u32, u32) {
        self.meta().dims_at(magnification)
    }

    pub fn tile(&self, level: u32, row: u32, col: u32) -> Result<Arc<RgbImage>> {
        let key = (level, row, col);
        if let Some(t) = self.cache.lock().get(&key) {
            return Ok(t);
        }
        tile_extent(self.meta(), level, row, col)?;
        let tile = Arc::new(self.source.read_tile(level, row, col)?);
        self.cache.lock().insert(key, tile.clone());
        Ok(tile)
    }

    /// Reads a rectangle of a stored level; outside the level is white.
    pub fn read_level_rect(&self, level: u32, x: i64, y: i64, w: u32, h: u32) -> Result<RgbImage> {
        let meta = self.meta();
        let lv = meta
            .levels
            .get(level as usize)
            .ok_or_else(|| Error::NotFound(format!("level {level}")))?;
        let ts = meta.tile_size as i64;
        let mut out = RgbImage::white(w, h);
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + w as i64).min(lv.width as i64);
        let y1 = (y + h as i64).min(lv.height as i64);
        if x0 >= x1 || y0 >= y1 {
            return Ok(out);
        }
        for row in (y0 / ts)..=((y1 - 1) / ts) {
            for col in (x0 / ts)..=((x1 - 1) / ts) {
                let tile = self.tile(level, row as u32, col as u32)?;
                out.blit(&tile, col * ts - x, row * ts - y);
            }
        }
        Ok(out)
    }

    /// Reads `w × h` pixels at `magnification`, with (x, y) in that
    /// magnification's frame. Out-of-bounds area is white; downscaling uses
    /// area averaging from the nearest finer stored level.
    pub fn read_region(
        &self,
        magnification: f64,
        x: i64,
        y: i64,
        w: u32,
        h: u32,
    ) -> Result<RgbImage> {
        let meta = self.meta();
        if !(magnification > 0.0) || magnification > meta.base_magnification + MAG_EPS {
            return Err(Error::UnsupportedMagnification {
                requested: magnification,
                base: meta.base_magnification,
            });
        }
        let level = meta
            .levels
            .iter()
            .rev()
            .find(|l| l.magnification + MAG_EPS >= magnification)
            .expect("level 0 is at base magnification");
        let factor = level.magnification / magnification;
        let n = factor.round();
        if (factor - n).abs() < 1e-9 {
            let n = n as u32;
            if n == 1 {
                return self.read_level_rect(level.level, x, y, w, h);
            }
            let src = self.read_level_rect(
                level.level,
                x * n as i64,
                y * n as i64,
                w * n,
                h * n,
            )?;
            return Ok(block_average(&src, n));
        }
        // Fractional factor: exact area weights over the covering source window.
        let sx0 = (x as f64 * factor).floor() as i64;
        let sy0 = (y as f64 * factor).floor() as i64;
        let sx1 = ((x + w as i64) as f64 * factor).ceil() as i64;
        let sy1 = ((y + h as i64) as f64 * factor).ceil() as i64;
        let src = self.read_level_rect(
            level.level,
            sx0,
            sy0,
            (sx1 - sx0) as u32,
            (sy1 - sy0) as u32,
        )?;
        let wx = area_weights(x, w, factor, sx0);
        let wy = area_weights(y, h, factor, sy0);
        let mut out = RgbImage::white(w, h);
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = [0f64; 3];
                let mut total = 0.0;
                for &(sy, fy) in ry {
                    for &(sx, fx) in rx {
                        let p = src.pixel(sx as u32, sy as u32);
                        let a = fx * fy;
                        total += a;
                        for c in 0..3 {
                            acc[c] += a * p[c] as f64;
                        }
                    }
                }
                let px = [0, 1, 2].map(|c| (acc[c] / total).round().clamp(0.0, 255.0) as u8);
                out.put(ox as u32, oy as u32, px);
            }
        }
        Ok(out)
    }
}

/// Per output index, the (source offset, overlap length) pairs it covers.
fn area_weights(start: i64, len: u32, factor: f64, src_origin: i64) -> Vec<Vec<(usize, f64)>> {
    (0..len as i64)
        .map(|i| {
            let a = (start + i) as f64 * factor;
            let b = (start + i + 1) as f64 * factor;
            let mut cells = Vec::new();
            let mut s = a.floor() as i64;
            while (s as f64) < b {
                let overlap = (b.min((s + 1) as f64) - a.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push(((s - src_origin) as usize, overlap));
                }
                s += 1;
            }
            cells
        })
        .collect()
}

/// Mean over non-overlapping `n × n` blocks, rounded half up. Input
/// dimensions that are not multiples of `n` are padded white.
pub fn block_average(src: &RgbImage, n: u32) -> RgbImage {
    if n == 1 {
        return src.clone();
    }
    let ow = src.width.div_ceil(n);
    let oh = src.height.div_ceil(n);
    let area = (n * n) as u32;
    let mut sums = vec![0u32; ow as usize * 3];
    let mut out = RgbImage::white(ow, oh);
    for oy in 0..oh {
        sums.iter_mut().for_each(|s| *s = 0);
        let mut counted = vec![0u32; ow as usize];
        for dy in 0..n {
            let sy = oy * n + dy;
            if sy >= src.height {
                break;
            }
            let row = &src.data[sy as usize * src.width as usize * 3..][..src.width as usize * 3];
            for (sx, p) in row.chunks_exact(3).enumerate() {
                let o = sx / n as usize;
                counted[o] += 1;
                let s = &mut sums[o * 3..o * 3 + 3];
                s[0] += p[0] as u32;
                s[1] += p[1] as u32;
                s[2] += p[2] as u32;
            }
        }
        for ox in 0..ow as usize {
            let missing = area - counted[ox];
            let px = [0, 1, 2].map(|c| {
                let total = sums[ox * 3 + c] + missing * 255;
                ((total + area / 2) / area) as u8
            });
            out.put(ox as u32, oy, px);
        }
    }
    out
}

/// Writes `base` as a Pyramid Directory at `root`; every level is the area
/// average of `base` over `2^k` blocks.
pub fn write_pyramid(
    root: &Path,
    slide_id: &str,
    base: &RgbImage,
    base_magnification: f64,
    tile_size: u32,
    mpp: Option<f64>,
) -> Result<SlideMeta> {
    let meta = SlideMeta::for_base(
        slide_id,
        base.width,
        base.height,
        base_magnification,
        tile_size,
        mpp,
    );
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut level_img = base.clone();
    for lv in &meta.levels {
        if lv.level > 0 {
            level_img = block_average(base, 1 << lv.level);
        }
        debug_assert_eq!((level_img.width, level_img.height), (lv.width, lv.height));
        for row in 0..lv.rows {
            for col in 0..lv.cols {
                let (tw, th) = tile_extent(&meta, lv.level, row, col)?;
                let tile = level_img.crop_padded(
                    (col * tile_size) as i64,
                    (row * tile_size) as i64,
                    tw,
                    th,
                );
                raster::write_atomic(
                    &DirectorySource::tile_path(root, lv.level, row, col),
                    &raster::encode_rgb_png(&tile)?,
                )?;
            }
        }
    }
    raster::write_json(&root.join("slide.json"), &meta)?;
    Ok(meta)
}

/// In-memory tile source, used for tests and freshly generated slides.
pub struct MemorySource {
    meta: SlideMeta,
    levels: Vec<RgbImage>,
}

impl MemorySource {
    pub fn new(slide_id: &str, base: RgbImage, base_magnification: f64, tile_size: u32) -> Self {
        let meta = SlideMeta::for_base(
            slide_id,
            base.width,
            base.height,
            base_magnification,
            tile_size,
            None,
        );
        let levels = meta
            .levels
            .iter()
            .map(|lv| {
                if lv.level == 0 {
                    base.clone()
                } else {
                    block_average(&base, 1 << lv.level)
                }
            })
            .collect();
        Self { meta, levels }
    }

    pub fn into_pyramid(self) -> SlidePyramid {
        SlidePyramid::from_source(Arc::new(self))
    }
}

impl TileSource for MemorySource {
    fn meta(&self) -> &SlideMeta {
        &self.meta
    }

    fn read_tile(&self, level: u32, row: u32, col: u32) -> Result<RgbImage> {
        let (w, h) = tile_extent(&self.meta, level, row, col)?;
        let ts = self.meta.tile_size;
        Ok(self.levels[level as usize].crop_padded(
            (col * ts) as i64,
            (row * ts) as i64,
            w,
            h,
        ))
    }
}

#[cfg(test)]
mod tests;
