use std::thread;

use proptest::prelude::*;

use super::*;
use crate::raster::{encode_rgb_png, write_atomic, WHITE};

fn gradient(w: u32, h: u32) -> RgbImage {
    let mut img = RgbImage::white(w, h);
    for y in 0..h {
        for x in 0..w {
            img.put(x, y, [(x * 7 + y) as u8, (y * 3) as u8, ((x ^ y) * 5) as u8]);
        }
    }
    img
}

/// Naive block mean used as an independent check on downsampled reads.
fn oracle_block_mean(src: &RgbImage, n: u32) -> RgbImage {
    let (ow, oh) = (src.width.div_ceil(n), src.height.div_ceil(n));
    let mut out = RgbImage::white(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let mut s = 0u32;
                for dy in 0..n {
                    for dx in 0..n {
                        let (x, y) = (ox * n + dx, oy * n + dy);
                        s += if x < src.width && y < src.height {
                            src.pixel(x, y)[c] as u32
                        } else {
                            255
                        };
                    }
                }
                px[c] = ((s as f64 / (n * n) as f64) + 0.5).floor() as u8;
            }
            out.put(ox, oy, px);
        }
    }
    out
}

#[test]
fn level_table_halves_down_to_tile_size() {
    let meta = SlideMeta::for_base("s", 4096, 4096, 20.0, 512, None);
    let dims: Vec<_> = meta.levels.iter().map(|l| (l.magnification, l.width)).collect();
    assert_eq!(dims, vec![(20.0, 4096), (10.0, 2048), (5.0, 1024), (2.5, 512)]);
    meta.validate().unwrap();

    let odd = SlideMeta::for_base("s", 3001, 1025, 20.0, 256, None);
    for pair in odd.levels.windows(2) {
        assert_eq!(pair[1].width, pair[0].width.div_ceil(2));
        assert_eq!(pair[1].height, pair[0].height.div_ceil(2));
    }
    assert!(odd.levels.last().unwrap().width <= 256);
}

#[test]
fn inconsistent_level_dims_are_rejected() {
    let mut meta = SlideMeta::for_base("s", 2048, 2048, 20.0, 512, None);
    meta.levels[1].width = 1000;
    meta.levels[1].cols = 2;
    assert!(matches!(meta.validate(), Err(Error::Invariant(_))));
}

#[test]
fn directory_without_metadata_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("level_0")).unwrap();
    assert!(matches!(open_slide(dir.path()), Err(Error::Format(_))));

    std::fs::write(
        dir.path().join("slide.json"),
        br#"{"schema_version":1,"slide_id":"x","base_magnification":20.0,"tile_size":512,"levels":[]}"#,
    )
    .unwrap();
    assert!(matches!(open_slide(dir.path()), Err(Error::Format(_))));
}

#[test]
fn plain_png_is_single_level_and_downsamples() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient(1024, 1024);
    let path = dir.path().join("plain.png");
    write_atomic(&path, &encode_rgb_png(&img).unwrap()).unwrap();
    let slide = open_slide(&path).unwrap();
    assert_eq!(slide.meta().levels.len(), 1);
    assert_eq!(slide.base_magnification(), 20.0);
    let half = slide.read_region(10.0, 0, 0, 512, 512).unwrap();
    assert_eq!((half.width, half.height), (512, 512));
    assert_eq!(half, oracle_block_mean(&img, 2));
}

#[test]
fn uniform_slide_reads_uniform() {
    let gray = [128, 128, 128];
    let slide = MemorySource::new("g", RgbImage::filled(1000, 700, gray), 20.0, 256).into_pyramid();
    let r = slide.read_region(20.0, 0, 0, 1000, 700).unwrap();
    assert!(r.data.chunks(3).all(|p| p == gray));
    let r5 = slide.read_region(5.0, 0, 0, 250, 175).unwrap();
    assert!(r5.data.chunks(3).all(|p| p == gray));
}

#[test]
fn region_past_right_edge_is_white() {
    let slide = MemorySource::new("g", RgbImage::filled(512, 512, [10, 20, 30]), 20.0, 128).into_pyramid();
    let r = slide.read_region(20.0, 384, 0, 256, 64).unwrap();
    for y in 0..64 {
        for x in 0..256 {
            let expect = if x < 128 { [10, 20, 30] } else { WHITE };
            assert_eq!(r.pixel(x, y), expect);
        }
    }
}

#[test]
fn magnification_above_base_is_unsupported() {
    let slide = MemorySource::new("g", RgbImage::white(64, 64), 20.0, 64).into_pyramid();
    assert!(matches!(
        slide.read_region(40.0, 0, 0, 4, 4),
        Err(Error::UnsupportedMagnification { .. })
    ));
}

#[test]
fn stored_5x_level_equals_block_average_of_base_read() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient(1531, 1203);
    write_pyramid(dir.path(), "grad", &img, 20.0, 256, None).unwrap();
    let slide = open_slide(dir.path()).unwrap();
    for &(x, y) in &[(0i64, 0i64), (37, 91), (-20, -13), (300, 250)] {
        let (w, h) = (96u32, 80u32);
        let at5 = slide.read_region(5.0, x, y, w, h).unwrap();
        let base = slide.read_region(20.0, x * 4, y * 4, w * 4, h * 4).unwrap();
        assert_eq!(at5, oracle_block_mean(&base, 4), "origin ({x},{y})");
    }
}

#[test]
fn fractional_factor_preserves_uniform_color() {
    let slide = MemorySource::new("g", RgbImage::filled(600, 600, [90, 40, 200]), 20.0, 600).into_pyramid();
    let r = slide.read_region(20.0 / 3.0, 0, 0, 200, 200).unwrap();
    assert!(r.data.chunks(3).all(|p| p == [90, 40, 200]));
    assert_eq!(slide.dims_at(20.0 / 3.0), (200, 200));
}

#[test]
fn concurrent_reads_agree() {
    let slide = MemorySource::new("g", gradient(2048, 2048), 20.0, 256).into_pyramid();
    let expected = slide.read_region(10.0, 100, 200, 300, 300).unwrap();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let s = slide.clone();
            thread::spawn(move || s.read_region(10.0, 100, 200, 300, 300).unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn reads_are_idempotent_and_padding_preserves_interior(
        x in -300i64..900, y in -300i64..900, w in 1u32..200, h in 1u32..200,
    ) {
        let img = gradient(700, 650);
        let slide = MemorySource::new("p", img.clone(), 20.0, 128).into_pyramid();
        let a = slide.read_region(20.0, x, y, w, h).unwrap();
        let b = slide.read_region(20.0, x, y, w, h).unwrap();
        prop_assert_eq!(&a, &b);
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = (x + ox as i64, y + oy as i64);
                let expect = if sx >= 0 && sy >= 0 && sx < 700 && sy < 650 {
                    img.pixel(sx as u32, sy as u32)
                } else {
                    WHITE
                };
                prop_assert_eq!(a.pixel(ox, oy), expect);
            }
        }
    }
}
