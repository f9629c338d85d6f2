use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use chrono::Utc;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{CheckpointMeta, EpochRecord, SegCheckpoint, CHECKPOINT_SCHEMA_VERSION};
use super::labels::LabelMap;
use super::loss::{scalar, weighted_cross_entropy};
use super::model::{Dmmn, DmmnConfig, PatchBatch};
use super::{compute_class_weights, ClassWeights, CARCINOMA, UNLABELED};
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::nn::{tensor_map_hash, Optimizer, Sgd};
use crate::patch::{extract_multimag_sized, patch_origin, AugmentPolicy, PatchManifest, Split, Transform};
use crate::raster::{GrayImage, RgbImage};
use crate::slide::SlidePyramid;

/// Learning rate for training from random initialization.
pub const TRAIN_LR: f64 = 5e-5;
/// Learning rate for finetuning from a previous checkpoint.
pub const FINETUNE_LR: f64 = 5e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegTrainConfig {
    #[serde(default)]
    pub model: DmmnConfig,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Overrides the train/finetune default when set.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_augment")]
    pub augment: Option<AugmentPolicy>,
    /// Random subset of training patches visited per epoch; all when unset.
    #[serde(default)]
    pub samples_per_epoch: Option<usize>,
}

fn default_epochs() -> u32 {
    20
}
fn default_batch() -> usize {
    8
}
fn default_momentum() -> f64 {
    0.99
}
fn default_wd() -> f64 {
    1e-4
}
fn default_augment() -> Option<AugmentPolicy> {
    Some(AugmentPolicy::segmentation())
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            model: DmmnConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: None,
            momentum: default_momentum(),
            weight_decay: default_wd(),
            seed: 0,
            augment: default_augment(),
            samples_per_epoch: None,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Validation(format!("learning rate {lr} must be positive")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// One training example: concentric inputs and the 20× labels under them.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub slide_id: String,
    pub center: (i64, i64),
    pub images: [RgbImage; 3],
    pub labels: GrayImage,
}

/// Slides and their cumulative annotations, keyed by slide id.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    pub slides: BTreeMap<String, SlidePyramid>,
    pub annotations: BTreeMap<String, LabelMap>,
}

/// Reads the patches for `entries`; entries without any labeled pixel under
/// the 20× patch are skipped.
pub fn build_samples<'a>(
    entries: impl IntoIterator<Item = &'a crate::patch::ManifestEntry>,
    pool: &TrainingPool,
    patch: usize,
) -> Result<Vec<SegSample>> {
    let size = patch as u32;
    let mut out = Vec::new();
    for e in entries {
        let Some(labels) = pool.annotations.get(&e.slide_id) else {
            continue;
        };
        let slide = pool
            .slides
            .get(&e.slide_id)
            .ok_or_else(|| Error::NotFound(format!("slide {}", e.slide_id)))?;
        let (x, y) = patch_origin(slide.base_magnification(), 20.0, e.center, size);
        if labels.labeled_in(x, y, size, size) == 0 {
            continue;
        }
        let p = extract_multimag_sized(slide, e.center, size)?;
        out.push(SegSample {
            slide_id: e.slide_id.clone(),
            center: e.center,
            images: p.images,
            labels: labels.crop(x, y, size, size),
        });
    }
    Ok(out)
}

/// Where the parameters of a run come from.
pub enum Start<'a> {
    Random,
    From(&'a SegCheckpoint),
}

/// Position of the resulting checkpoint in a model lineage.
#[derive(Debug, Clone, Default)]
pub struct Lineage {
    pub iteration: u32,
    pub parent_hash: Option<String>,
    pub manifest_version: Option<u64>,
}

/// Index of the best epoch: highest IOU, undefined counting as 0, ties to
/// the earliest.
pub fn select_epoch(ious: &[Option<f64>]) -> usize {
    let mut best = 0;
    for (i, v) in ious.iter().enumerate() {
        if v.unwrap_or(0.0) > ious[best].unwrap_or(0.0) {
            best = i;
        }
    }
    best
}

/// Trains on the manifest's train split and selects on its val split
/// (falling back to the train split when no val entries exist). Starts from
/// `init` when given, otherwise from random parameters.
pub fn train_segmentation(
    config: &SegTrainConfig,
    manifest: &PatchManifest,
    pool: &TrainingPool,
    init: Option<&SegCheckpoint>,
) -> Result<SegCheckpoint> {
    let (start, lineage) = match init {
        Some(c) => (
            Start::From(c),
            Lineage {
                iteration: c.meta.iteration + 1,
                parent_hash: Some(c.hash().to_string()),
                manifest_version: Some(manifest.version),
            },
        ),
        None => (
            Start::Random,
            Lineage {
                manifest_version: Some(manifest.version),
                ..Default::default()
            },
        ),
    };
    run_training(config, manifest, pool, start, lineage, &mut |_| {})
}

/// Continues from `prev` at the finetuning rate; the result is tagged one
/// iteration after `prev`.
pub fn finetune_segmentation(
    prev: &SegCheckpoint,
    config: &SegTrainConfig,
    manifest: &PatchManifest,
    pool: &TrainingPool,
) -> Result<SegCheckpoint> {
    let config = SegTrainConfig {
        lr: Some(config.lr.unwrap_or(FINETUNE_LR)),
        ..config.clone()
    };
    train_segmentation(&config, manifest, pool, Some(prev))
}

/// Manifest-level entry point with explicit start and lineage.
pub fn run_training(
    config: &SegTrainConfig,
    manifest: &PatchManifest,
    pool: &TrainingPool,
    start: Start<'_>,
    lineage: Lineage,
    progress: &mut dyn FnMut(f64),
) -> Result<SegCheckpoint> {
    config.validate()?;
    let train = build_samples(manifest.in_split(Split::Train), pool, config.model.patch)?;
    if train.is_empty() {
        return Err(Error::Training("no labeled training patches in the manifest".into()));
    }
    let val = build_samples(manifest.in_split(Split::Val), pool, config.model.patch)?;
    let train_slides: std::collections::BTreeSet<&str> =
        manifest.in_split(Split::Train).map(|e| e.slide_id.as_str()).collect();
    let weights = compute_class_weights(
        pool.annotations
            .iter()
            .filter(|(k, _)| train_slides.contains(k.as_str()))
            .map(|(_, v)| v),
    )?;
    train_on_samples(config, &train, &val, &weights, start, lineage, progress)
}

/// Core loop: SGD with momentum on the weighted loss, one selection
/// evaluation per epoch (the initial parameters count as epoch 0).
pub fn train_on_samples(
    config: &SegTrainConfig,
    train: &[SegSample],
    val: &[SegSample],
    weights: &ClassWeights,
    start: Start<'_>,
    lineage: Lineage,
    progress: &mut dyn FnMut(f64),
) -> Result<SegCheckpoint> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let net = Dmmn::new(&config.model, DType::F32, config.seed)?;
    let default_lr = match &start {
        Start::Random => TRAIN_LR,
        Start::From(c) => {
            if c.meta.model != config.model {
                return Err(Error::Contract(format!(
                    "checkpoint {} has a different network configuration",
                    c.meta.tag
                )));
            }
            net.store().restore(&c.params)?;
            FINETUNE_LR
        }
    };
    let lr = config.lr.unwrap_or(default_lr);
    let mut opt = Sgd::new(lr, config.momentum, config.weight_decay);
    let init_hash = tensor_map_hash(&net.store().snapshot()?)?;
    let (selection, selection_set) = if val.is_empty() { (train, "train") } else { (val, "val") };

    let evaluate = |net: &Dmmn| -> Result<Option<f64>> {
        let iou = binary_iou(net, selection, config.batch_size)?.iou();
        Ok(iou.is_defined().then(|| iou.value()))
    };

    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_iou: evaluate(&net)?,
    }];
    let mut best = (0u32, net.store().snapshot()?, opt.state()?);
    let per_epoch = config.samples_per_epoch.unwrap_or(train.len()).min(train.len());
    let steps_total = (config.epochs as usize * per_epoch.div_ceil(config.batch_size)).max(1);
    let mut steps_done = 0;
    let trainable: Vec<(String, candle_core::Var)> = net
        .store()
        .trainable()
        .into_iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    let params: Vec<(&str, &candle_core::Var)> = trainable.iter().map(|(n, v)| (n.as_str(), v)).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(per_epoch);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let augmented: Vec<([RgbImage; 3], GrayImage)> = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    match &config.augment {
                        Some(policy) => {
                            let t = Transform::sample(policy, rand::Rng::gen(&mut rng));
                            (s.images.clone().map(|im| t.apply_rgb(&im)), t.apply_labels(&s.labels))
                        }
                        None => (s.images.clone(), s.labels.clone()),
                    }
                })
                .collect();
            let triples: Vec<[&RgbImage; 3]> = augmented
                .iter()
                .map(|(im, _)| [&im[0], &im[1], &im[2]])
                .collect();
            let labels: Vec<u8> = augmented.iter().flat_map(|(_, l)| l.data.iter().copied()).collect();
            let batch = PatchBatch::from_images(&triples, DType::F32)?;
            let logits = net.forward(&batch, true)?;
            let loss = weighted_cross_entropy(&logits, &labels, &weights.w)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {value} at epoch {epoch}, batch {batches}; last good parameters kept"
                )));
            }
            let grads = loss.backward()?;
            opt.step(&params, &grads)?;
            loss_sum += value;
            batches += 1;
            steps_done += 1;
            progress(steps_done as f64 / steps_total as f64);
        }
        if net.store().any_non_finite()? {
            return Err(Error::Training(format!("parameters diverged in epoch {epoch}")));
        }
        let iou = evaluate(&net)?;
        log::info!("epoch {epoch}: loss {:.5} {selection_set} iou {:?}", loss_sum / batches.max(1) as f64, iou);
        history.push(EpochRecord {
            epoch,
            train_loss: Some(loss_sum / batches.max(1) as f64),
            val_iou: iou,
        });
        let ious: Vec<Option<f64>> = history.iter().map(|h| h.val_iou).collect();
        if select_epoch(&ious) == epoch as usize {
            best = (epoch, net.store().snapshot()?, opt.state()?);
        }
    }
    progress(1.0);

    let (selected_epoch, params, optimizer) = best;
    let params_hash = tensor_map_hash(&params)?;
    Ok(SegCheckpoint {
        meta: CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            tag: format!("M{}", lineage.iteration),
            iteration: lineage.iteration,
            model: config.model.clone(),
            config_hash: config.hash(),
            lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            epochs: config.epochs,
            batch_size: config.batch_size,
            seed: config.seed,
            manifest_version: lineage.manifest_version,
            val_iou: history[selected_epoch as usize].val_iou,
            selection_set: selection_set.into(),
            selected_epoch,
            history,
            params_hash,
            init_hash,
            parent_hash: lineage.parent_hash,
            created_at: Utc::now(),
        },
        params,
        optimizer,
    })
}

/// Class scores for a batch of samples in evaluation mode, as argmax maps.
pub(crate) fn predict_samples(net: &Dmmn, samples: &[&[RgbImage; 3]]) -> Result<Vec<GrayImage>> {
    let triples: Vec<[&RgbImage; 3]> = samples.iter().map(|s| [&s[0], &s[1], &s[2]]).collect();
    let batch = PatchBatch::from_images(&triples, DType::F32)?;
    let logits = net.forward(&batch, false)?;
    argmax_maps(&logits)
}

/// `(B, C, H, W)` scores to per-image class maps; ties go to the lower class.
pub(crate) fn argmax_maps(logits: &Tensor) -> Result<Vec<GrayImage>> {
    let (b, c, h, w) = logits.dims4()?;
    let v: Vec<f32> = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok((0..b)
        .map(|i| {
            let base = i * c * plane;
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if v[base + k * plane + p] > v[base + best * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            GrayImage {
                width: w as u32,
                height: h as u32,
                data,
            }
        })
        .collect())
}

/// Pooled binary cancer confusion over the labeled pixels of `samples`.
pub fn binary_iou(net: &Dmmn, samples: &[SegSample], batch_size: usize) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs: Vec<&[RgbImage; 3]> = chunk.iter().map(|s| &s.images).collect();
        for (pred, s) in predict_samples(net, &imgs)?.iter().zip(chunk) {
            for (&p, &t) in pred.data.iter().zip(&s.labels.data) {
                if t != UNLABELED {
                    counts.add(p == CARCINOMA, t == CARCINOMA);
                }
            }
        }
    }
    Ok(counts)
}
