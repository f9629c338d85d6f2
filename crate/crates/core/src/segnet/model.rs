use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamStore};
use crate::raster::RgbImage;

/// Size knobs of the multi-magnification network. The input/output contract
/// is fixed: three concentric `patch × patch` RGB inputs (20×, 10×, 5×), one
/// six-channel `patch × patch` score map at 20×.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmmnConfig {
    /// Base channel width; deeper stages use twice this.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_width() -> usize {
    8
}
fn default_patch() -> usize {
    256
}
fn default_true() -> bool {
    true
}

impl Default for DmmnConfig {
    fn default() -> Self {
        Self {
            width: default_width(),
            patch: default_patch(),
            batch_norm: true,
        }
    }
}

impl DmmnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.patch == 0 || self.patch % 16 != 0 {
            return Err(Error::Validation(format!(
                "network width must be positive and patch a multiple of 16 (got {} / {})",
                self.width, self.patch
            )));
        }
        Ok(())
    }
}

/// Normalized input tensors, each `(B, 3, P, P)`.
pub struct PatchBatch {
    pub x20: Tensor,
    pub x10: Tensor,
    pub x5: Tensor,
}

const MEAN: f32 = 0.7;
const STD: f32 = 0.2;

/// `(B, 3, H, W)` tensor from equally sized RGB images, scaled to roughly
/// zero mean and unit spread.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Contract("empty image batch".into()));
    };
    let (w, h) = (first.width as usize, first.height as usize);
    let plane = w * h;
    let mut buf = vec![0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if (img.width as usize, img.height as usize) != (w, h) {
            return Err(Error::Contract("images in a batch differ in size".into()));
        }
        let base = b * 3 * plane;
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                buf[base + c * plane + i] = (px[c] as f32 / 255.0 - MEAN) / STD;
            }
        }
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl PatchBatch {
    /// Each element is a (20×, 10×, 5×) triple.
    pub fn from_images(triples: &[[&RgbImage; 3]], dtype: DType) -> Result<Self> {
        let pick = |k: usize| triples.iter().map(|t| t[k]).collect::<Vec<_>>();
        Ok(Self {
            x20: images_to_tensor(&pick(0), dtype)?,
            x10: images_to_tensor(&pick(1), dtype)?,
            x5: images_to_tensor(&pick(2), dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x20.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Block {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bn: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, if stride == 1 { k / 2 } else { 0 }, !bn, rng)?;
        let bn = if bn {
            Some(BatchNorm2d::new(store, &format!("{name}.bn"), cout)?)
        } else {
            None
        };
        Ok(Self { conv, bn })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = match &self.bn {
            Some(bn) => bn.forward(&y, train)?,
            None => y,
        };
        Ok(y.relu()?)
    }
}

/// Encoder for one magnification: a stride-4 stem, then three stages at
/// 1/4, 1/8 and 1/16 of the input resolution.
struct Encoder {
    stem: Block,
    e1: Block,
    e2: Block,
    e3: Block,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, c: usize, bn: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            stem: Block::new(store, &format!("{name}.stem"), 3, c, 4, 4, bn, rng)?,
            e1: Block::new(store, &format!("{name}.e1"), c, c, 3, 1, bn, rng)?,
            e2: Block::new(store, &format!("{name}.e2"), c, 2 * c, 3, 1, bn, rng)?,
            e3: Block::new(store, &format!("{name}.e3"), 2 * c, 2 * c, 3, 1, bn, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<[Tensor; 3]> {
        let e1 = self.e1.forward(&self.stem.forward(x, train)?, train)?;
        let e2 = self.e2.forward(&e1.avg_pool2d(2)?, train)?;
        let e3 = self.e3.forward(&e2.avg_pool2d(2)?, train)?;
        Ok([e1, e2, e3])
    }
}

/// Decoder of a context magnification; its outputs feed the 20× decoder.
struct ContextDecoder {
    d2: Block,
    d1: Block,
}

impl ContextDecoder {
    fn new(store: &mut ParamStore, name: &str, c: usize, bn: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            d2: Block::new(store, &format!("{name}.d2"), 4 * c, 2 * c, 1, 1, bn, rng)?,
            d1: Block::new(store, &format!("{name}.d1"), 3 * c, c, 1, 1, bn, rng)?,
        })
    }

    fn forward(&self, e: &[Tensor; 3], train: bool) -> Result<(Tensor, Tensor)> {
        let d2 = self.d2.forward(&Tensor::cat(&[&up(&e[2], 2)?, &e[1]], 1)?, train)?;
        let d1 = self.d1.forward(&Tensor::cat(&[&up(&d2, 2)?, &e[0]], 1)?, train)?;
        Ok((d2, d1))
    }
}

fn up(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * k, w * k)?)
}

/// Central `1/k` window of a feature map, upsampled back by `k`: aligns a
/// context magnification's features with the 20× field of view.
fn center_up(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ch, cw) = (h / k, w / k);
    let c = x.narrow(2, (h - ch) / 2, ch)?.narrow(3, (w - cw) / 2, cw)?;
    up(&c, k)
}

/// Row-major `(out, inp)` matrix of bilinear interpolation with half-pixel
/// centres and edge clamping.
fn bilinear_matrix(out: usize, inp: usize) -> Vec<f32> {
    let scale = inp as f64 / out as f64;
    let mut m = vec![0f32; out * inp];
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let f = src - i0 as f64;
        m[o * inp + i0] += (1.0 - f) as f32;
        m[o * inp + i1] += f as f32;
    }
    m
}

/// Multi-encoder, multi-decoder network with multi-magnification
/// concatenation into the 20× decoder.
pub struct Dmmn {
    config: DmmnConfig,
    store: ParamStore,
    enc: [Encoder; 3],
    dec10: ContextDecoder,
    dec5: ContextDecoder,
    d2: Block,
    d1: Block,
    head: Conv2d,
    /// Bilinear ×4 interpolation matrix, `(P, P/4)`.
    interp: Tensor,
}

impl Dmmn {
    pub fn new(config: &DmmnConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let (c, bn) = (config.width, config.batch_norm);
        let enc = [
            Encoder::new(&mut store, "enc20", c, bn, &mut rng)?,
            Encoder::new(&mut store, "enc10", c, bn, &mut rng)?,
            Encoder::new(&mut store, "enc5", c, bn, &mut rng)?,
        ];
        let dec10 = ContextDecoder::new(&mut store, "dec10", c, bn, &mut rng)?;
        let dec5 = ContextDecoder::new(&mut store, "dec5", c, bn, &mut rng)?;
        let d2 = Block::new(&mut store, "dec20.d2", 8 * c, 2 * c, 1, 1, bn, &mut rng)?;
        let d1 = Block::new(&mut store, "dec20.d1", 5 * c, c, 1, 1, bn, &mut rng)?;
        let head = Conv2d::new(&mut store, "head", c, NUM_CLASSES, 1, 1, 0, true, &mut rng)?;
        let interp = Tensor::from_vec(
            bilinear_matrix(config.patch, config.patch / 4),
            (config.patch, config.patch / 4),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?;
        Ok(Self {
            config: config.clone(),
            store,
            enc,
            dec10,
            dec5,
            d2,
            d1,
            head,
            interp,
        })
    }

    pub fn config(&self) -> &DmmnConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Raw class scores `(B, 6, P, P)`.
    pub fn forward(&self, batch: &PatchBatch, train: bool) -> Result<Tensor> {
        let p = self.config.patch;
        for (name, x) in [("20x", &batch.x20), ("10x", &batch.x10), ("5x", &batch.x5)] {
            let d = x.dims();
            if d.len() != 4 || d[1] != 3 || d[2] != p || d[3] != p || d[0] != batch.x20.dims()[0] {
                return Err(Error::Contract(format!(
                    "{name} input has shape {d:?}, expected (B, 3, {p}, {p})"
                )));
            }
        }
        let e20 = self.enc[0].forward(&batch.x20, train)?;
        let e10 = self.enc[1].forward(&batch.x10, train)?;
        let e5 = self.enc[2].forward(&batch.x5, train)?;
        let (c2_10, c1_10) = self.dec10.forward(&e10, train)?;
        let (c2_5, c1_5) = self.dec5.forward(&e5, train)?;
        let d2 = self.d2.forward(
            &Tensor::cat(
                &[&up(&e20[2], 2)?, &e20[1], &center_up(&c2_10, 2)?, &center_up(&c2_5, 4)?],
                1,
            )?,
            train,
        )?;
        let d1 = self.d1.forward(
            &Tensor::cat(
                &[&up(&d2, 2)?, &e20[0], &center_up(&c1_10, 2)?, &center_up(&c1_5, 4)?],
                1,
            )?,
            train,
        )?;
        // Scores at 1/4 resolution, then separable bilinear upsampling
        // `U · S · Uᵀ` per image and class.
        let coarse = self.head.forward(&d1)?;
        let (b, k, n, _) = coarse.dims4()?;
        let flat = coarse.reshape((b * k, n, n))?;
        let wide = flat.broadcast_matmul(&self.interp.t()?)?;
        let full = self.interp.broadcast_matmul(&wide)?;
        Ok(full.reshape((b, k, p, p))?)
    }
}
