//! Plain in-memory rasters and their PNG encodings.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const WHITE: [u8; 3] = [255, 255, 255];

/// Interleaved 8-bit RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn white(width: u32, height: u32) -> Self {
        Self::filled(width, height, WHITE)
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::Contract(format!(
                "rgb buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, p: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&p);
    }

    /// Copy `src` into `self` with its top-left corner at (dx, dy); parts
    /// falling outside `self` are dropped.
    pub fn blit(&mut self, src: &RgbImage, dx: i64, dy: i64) {
        let x0 = dx.max(0);
        let y0 = dy.max(0);
        let x1 = (dx + src.width as i64).min(self.width as i64);
        let y1 = (dy + src.height as i64).min(self.height as i64);
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        let n = (x1 - x0) as usize * 3;
        for y in y0..y1 {
            let sy = (y - dy) as usize;
            let sx = (x0 - dx) as usize;
            let s = (sy * src.width as usize + sx) * 3;
            let d = (y as usize * self.width as usize + x0 as usize) * 3;
            self.data[d..d + n].copy_from_slice(&src.data[s..s + n]);
        }
    }

    /// Crop with white padding for any part outside the image.
    pub fn crop_padded(&self, x: i64, y: i64, w: u32, h: u32) -> RgbImage {
        let mut out = RgbImage::white(w, h);
        out.blit(self, -x, -y);
        out
    }

    /// Luma grayscale with 0.299/0.587/0.114 weights, rounded.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for p in self.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += p[c] as u64;
            }
        }
        let n = (self.width as u64 * self.height as u64).max(1) as f64;
        [sums[0] as f64 / n, sums[1] as f64 / n, sums[2] as f64 / n]
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Single-channel 8-bit raster; used for grayscale images and label maps.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    /// Crop with `fill` for any part outside the raster.
    pub fn crop_padded(&self, x: i64, y: i64, w: u32, h: u32, fill: u8) -> GrayImage {
        let mut out = GrayImage::filled(w, h, fill);
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + w as i64).min(self.width as i64);
        let y1 = (y + h as i64).min(self.height as i64);
        if x0 < x1 && y0 < y1 {
            let n = (x1 - x0) as usize;
            for sy in y0..y1 {
                let s = sy as usize * self.width as usize + x0 as usize;
                let d = (sy - y) as usize * w as usize + (x0 - x) as usize;
                out.data[d..d + n].copy_from_slice(&self.data[s..s + n]);
            }
        }
        out
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

fn open_reader(path: &Path) -> Result<png::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    Ok(decoder.read_info()?)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let mut reader = open_reader(path)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width, info.height);
    let data = match (info.color_type, info.bit_depth) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => buf,
        (png::ColorType::Rgba, png::BitDepth::Eight) => {
            buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
        }
        (png::ColorType::Grayscale, png::BitDepth::Eight) => {
            buf.iter().flat_map(|&v| [v, v, v]).collect()
        }
        (ct, bd) => {
            return Err(Error::Format(format!(
                "{}: unsupported png layout {ct:?}/{bd:?}",
                path.display()
            )))
        }
    };
    RgbImage::from_raw(w, h, data)
}

/// Reads an 8-bit grayscale or indexed PNG as raw sample values (palette
/// indices are returned as-is, not expanded).
pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {
            Ok(GrayImage {
                width: info.width,
                height: info.height,
                data: buf,
            })
        }
        (png::ColorType::Grayscale, png::BitDepth::One) => {
            let stride = info.line_size;
            let mut data = Vec::with_capacity(info.width as usize * info.height as usize);
            for row in buf.chunks(stride).take(info.height as usize) {
                for x in 0..info.width as usize {
                    data.push((row[x / 8] >> (7 - x % 8)) & 1);
                }
            }
            Ok(GrayImage {
                width: info.width,
                height: info.height,
                data,
            })
        }
        (ct, bd) => Err(Error::Format(format!(
            "{}: expected 8-bit gray/indexed or 1-bit png, got {ct:?}/{bd:?}",
            path.display()
        ))),
    }
}

fn encode(
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<(&[u8], &[u8])>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Fast);
        if let Some((plte, trns)) = palette {
            enc.set_palette(plte.to_vec());
            enc.set_trns(trns.to_vec());
        }
        let mut w = enc.write_header()?;
        w.write_image_data(data)?;
        w.finish()?;
    }
    Ok(out)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    encode(
        img.width,
        img.height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        None,
        &img.data,
    )
}

pub fn encode_gray_png(img: &GrayImage) -> Result<Vec<u8>> {
    encode(
        img.width,
        img.height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        None,
        &img.data,
    )
}

/// 1-bit grayscale; any nonzero sample is written as 1.
pub fn encode_bitmap_png(img: &GrayImage) -> Result<Vec<u8>> {
    let stride = (img.width as usize).div_ceil(8);
    let mut packed = vec![0u8; stride * img.height as usize];
    for y in 0..img.height as usize {
        for x in 0..img.width as usize {
            if img.data[y * img.width as usize + x] != 0 {
                packed[y * stride + x / 8] |= 1 << (7 - x % 8);
            }
        }
    }
    encode(
        img.width,
        img.height,
        png::ColorType::Grayscale,
        png::BitDepth::One,
        None,
        &packed,
    )
}

/// Indexed-color PNG; `palette` holds RGB triples, `alpha` one entry per color.
pub fn encode_indexed_png(img: &GrayImage, palette: &[[u8; 3]], alpha: &[u8]) -> Result<Vec<u8>> {
    let plte: Vec<u8> = palette.iter().flatten().copied().collect();
    encode(
        img.width,
        img.height,
        png::ColorType::Indexed,
        png::BitDepth::Eight,
        Some((&plte, alpha)),
        &img.data,
    )
}

/// Write-then-rename so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        let f = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_pads_white_outside() {
        let img = RgbImage::filled(4, 4, [10, 20, 30]);
        let c = img.crop_padded(2, 0, 4, 2);
        assert_eq!(c.pixel(0, 0), [10, 20, 30]);
        assert_eq!(c.pixel(1, 1), [10, 20, 30]);
        assert_eq!(c.pixel(2, 0), WHITE);
        assert_eq!(c.pixel(3, 1), WHITE);
    }

    #[test]
    fn luma_of_gray_is_identity() {
        for v in [0u8, 1, 127, 128, 254, 255] {
            assert_eq!(luma(v, v, v), v);
        }
    }

    #[test]
    fn png_encodings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rgb = RgbImage::white(5, 3);
        rgb.put(1, 2, [1, 2, 3]);
        let p = dir.path().join("a.png");
        write_atomic(&p, &encode_rgb_png(&rgb).unwrap()).unwrap();
        assert_eq!(read_rgb_png(&p).unwrap(), rgb);

        let mut bits = GrayImage::filled(11, 3, 0);
        bits.set(9, 1, 1);
        bits.set(0, 2, 1);
        write_atomic(&p, &encode_bitmap_png(&bits).unwrap()).unwrap();
        assert_eq!(read_gray_png(&p).unwrap(), bits);

        let mut idx = GrayImage::filled(3, 3, 5);
        idx.set(1, 1, 0);
        let pal = [[255, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0]];
        write_atomic(&p, &encode_indexed_png(&idx, &pal, &[255, 255, 255, 255, 255, 0]).unwrap())
            .unwrap();
        assert_eq!(read_gray_png(&p).unwrap(), idx);
    }
}
