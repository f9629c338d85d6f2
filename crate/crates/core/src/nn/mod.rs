//! Small neural-network toolkit over candle tensors: named parameter
//! storage, the handful of layers the two models need, and the SGD and Adam
//! update rules.

mod optim;

pub use optim::{Adam, Optimizer, Sgd};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named tensors. Trainable parameters and non-trainable buffers (running
/// statistics) live side by side; only parameters reach the optimizer.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<Entry>,
}

struct Entry {
    name: String,
    var: Var,
    trainable: bool,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn push(&mut self, name: String, data: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Tensor> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.entries.push(Entry {
            name,
            var,
            trainable,
        });
        Ok(handle)
    }

    /// Uniform(−bound, bound) parameter drawn from `rng`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.push(name.to_string(), data, shape, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.push(name.to_string(), vec![value; n], shape, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.push(name.to_string(), vec![value; n], shape, false)
    }

    pub fn trainable(&self) -> Vec<(&str, &Var)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.as_str(), &e.var))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.var)
    }

    pub fn num_parameters(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.var.as_tensor().elem_count())
            .sum()
    }

    /// Detached copies of every entry, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.var.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every entry from `values`; names and shapes must match.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} tensors, model has {}",
                values.len(),
                self.entries.len()
            )));
        }
        for e in &self.entries {
            let v = values
                .get(&e.name)
                .ok_or_else(|| Error::Contract(format!("snapshot lacks {}", e.name)))?;
            if v.dims() != e.var.as_tensor().dims() {
                return Err(Error::Contract(format!(
                    "{}: shape {:?} vs {:?}",
                    e.name,
                    v.dims(),
                    e.var.as_tensor().dims()
                )));
            }
            e.var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn any_non_finite(&self) -> Result<bool> {
        for e in &self.entries {
            let v: Vec<f64> = e.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// SHA-256 over names, shapes and little-endian f32 values in name order;
/// stable across file encodings.
pub fn tensor_map_hash(values: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in values {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.dims().len() as u64).to_le_bytes());
        for &d in t.dims() {
            h.update((d as u64).to_le_bytes());
        }
        let v: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn save_tensors(path: &Path, values: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let map: HashMap<String, Tensor> = values
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    let tmp = path.with_extension("tmp");
    candle_core::safetensors::save(&map, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?
        .into_iter()
        .collect())
}

/// 2-D convolution with bias, PyTorch default initialization
/// (uniform ±1/√fan_in for weights and bias).
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound, rng)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[cout], bound, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[dout, din], bound, rng)?,
            bias: store.uniform(&format!("{name}.bias"), &[dout], bound, rng)?,
        })
    }

    /// All-zero layer; its first update aligns it with the gradient instead
    /// of a random projection.
    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[dout, din], 0.0)?,
            bias: store.constant(&format!("{name}.bias"), &[dout], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization over (N, H, W) per channel. Training mode normalizes
/// with batch statistics and updates the running averages (momentum 0.1).
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let beta = store.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?;
        store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?;
        Ok(Self {
            gamma,
            beta,
            running_mean: store.get(&format!("{name}.running_mean")).unwrap().clone(),
            running_var: store.get(&format!("{name}.running_var")).unwrap().clone(),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (x.elem_count() / c) as f64;
            let unbiased = (var.detach() * (n / (n - 1.0).max(1.0)))?.flatten_all()?;
            let m = 0.1;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?,
            )?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Log-softmax over the last dimension, shifted by the detached row maximum.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_last(x)?.exp()?)
}

/// Class-weighted cross-entropy over rows of `(N, C)` logits:
/// `Σ w_{y_i} · (−log p_i(y_i)) / Σ w_{y_i}`.
pub fn weighted_cross_entropy_rows(logits: &Tensor, targets: &[u32], weights: &[f64]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if targets.len() != n || weights.len() != c {
        return Err(Error::Contract(format!(
            "logits {:?} do not match {} targets and {} weights",
            logits.dims(),
            targets.len(),
            weights.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::Contract(format!("target {t} out of range")));
    }
    let row_w: Vec<f64> = targets.iter().map(|&t| weights[t as usize]).collect();
    let total: f64 = row_w.iter().sum();
    if total == 0.0 {
        return Ok((logits.sum_all()? * 0.0)?);
    }
    let dev = logits.device();
    let nll = log_softmax_last(logits)?
        .gather(&Tensor::from_vec(targets.to_vec(), (n, 1), dev)?, 1)?
        .squeeze(1)?
        .neg()?;
    let wt = Tensor::from_vec(row_w, n, dev)?.to_dtype(logits.dtype())?;
    Ok(((nll * wt)?.sum_all()? / total)?)
}
