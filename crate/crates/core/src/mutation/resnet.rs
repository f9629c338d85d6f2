use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamStore};

pub const PATCH_SIZE: usize = 224;
pub const NUM_OUTPUTS: usize = 2;

/// Blocks per stage of the 18-layer network.
const STAGES: [usize; 4] = [2, 2, 2, 2];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    /// Channels of the stem and first stage; each later stage doubles it.
    /// The reference network uses 64.
    #[serde(default = "default_width")]
    pub width: usize,
}

fn default_width() -> usize {
    8
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self { width: default_width() }
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let down = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(store, &format!("{name}.downsample.0"), cin, cout, 1, stride, 0, false, rng)?,
                BatchNorm2d::new(store, &format!("{name}.downsample.1"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), cout)?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// 3×3 max pooling with stride 2 and padding 1. Inputs are non-negative
/// (post-ReLU), so zero padding behaves like −∞ padding.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
    // Pad to 2·(o+1) so the padded input splits into even/odd planes.
    let x = x
        .pad_with_zeros(2, 1, 2 * (oh + 1) - h - 1)?
        .pad_with_zeros(3, 1, 2 * (ow + 1) - w - 1)?;
    let x = x.reshape((n, c, oh + 1, 2, ow + 1, 2))?;
    // Output row o covers padded rows 2o, 2o+1, 2o+2.
    let rows = |t: &Tensor, dim: usize, len: usize| -> Result<Tensor> {
        let even = t.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?;
        let odd = t.narrow(dim + 1, 1, 1)?.squeeze(dim + 1)?;
        let a = even.narrow(dim, 0, len)?;
        let b = odd.narrow(dim, 0, len)?;
        let c = even.narrow(dim, 1, len)?;
        Ok(a.maximum(&b)?.maximum(&c)?)
    };
    let x = rows(&x, 2, oh)?; // (n, c, oh, ow+1, 2)
    rows(&x, 3, ow)
}

/// The 18-layer residual classifier: 224×224 RGB to two logits.
pub struct ResNet18 {
    config: ResNetConfig,
    store: ParamStore,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    fc: Linear,
}

impl ResNet18 {
    pub fn new(config: &ResNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Validation("network width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let c = config.width;
        let stem = Conv2d::new(&mut store, "conv1", 3, c, 7, 2, 3, false, &mut rng)?;
        let stem_bn = BatchNorm2d::new(&mut store, "bn1", c)?;
        let mut blocks = Vec::new();
        let mut cin = c;
        for (stage, &count) in STAGES.iter().enumerate() {
            let cout = c << stage;
            for i in 0..count {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                let name = format!("layer{}.{i}", stage + 1);
                blocks.push(BasicBlock::new(&mut store, &name, cin, cout, stride, &mut rng)?);
                cin = cout;
            }
        }
        let fc = Linear::zeros(&mut store, "fc", cin, NUM_OUTPUTS)?;
        Ok(Self {
            config: config.clone(),
            store,
            stem,
            stem_bn,
            blocks,
            fc,
        })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Logits `(B, 2)` for a `(B, 3, 224, 224)` batch.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let d = x.dims();
        if d.len() != 4 || d[1] != 3 || d[2] != PATCH_SIZE || d[3] != PATCH_SIZE {
            return Err(Error::Contract(format!(
                "input has shape {d:?}, expected (B, 3, {PATCH_SIZE}, {PATCH_SIZE})"
            )));
        }
        let mut y = self.stem_bn.forward(&self.stem.forward(x)?, train)?.relu()?;
        y = max_pool_3x3_s2(&y)?;
        for b in &self.blocks {
            y = b.forward(&y, train)?;
        }
        let pooled = y.mean((2, 3))?;
        self.fc.forward(&pooled)
    }
}
