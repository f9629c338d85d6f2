use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::resnet::{ResNet18, ResNetConfig, PATCH_SIZE};
use super::{aggregate_slide, CancerPatchSet, Magnification, MutationStatus, PatchClassWeights, SlideScore};
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, Measure};
use crate::nn::{load_tensors, save_tensors, softmax_last, tensor_map_hash, weighted_cross_entropy_rows, Adam, Optimizer};
use crate::patch::{AugmentPolicy, Transform};
use crate::raster::{self, RgbImage};
use crate::segnet::images_to_tensor;
use crate::slide::SlidePyramid;

/// Adam learning rate for the patch classifier.
pub const CLF_LR: f64 = 1e-5;
pub const CLF_SCHEMA_VERSION: u32 = 1;
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfTrainConfig {
    pub magnification: Magnification,
    #[serde(default)]
    pub model: ResNetConfig,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
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
    16
}
fn default_lr() -> f64 {
    CLF_LR
}
fn default_augment() -> Option<AugmentPolicy> {
    Some(AugmentPolicy::classification())
}

impl ClfTrainConfig {
    pub fn new(magnification: Magnification) -> Self {
        Self {
            magnification,
            model: ResNetConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: CLF_LR,
            seed: 0,
            augment: default_augment(),
            samples_per_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.width == 0 || self.batch_size == 0 {
            return Err(Error::Validation("network width and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Patch images of one slide, read at one magnification.
#[derive(Debug, Clone)]
pub struct SlidePatches {
    pub slide_id: String,
    pub label: MutationStatus,
    pub magnification: Magnification,
    pub subsampled: bool,
    pub images: Vec<RgbImage>,
}

pub fn load_slide_patches(slide: &SlidePyramid, set: &CancerPatchSet) -> Result<SlidePatches> {
    if slide.slide_id() != set.slide_id {
        return Err(Error::Validation(format!(
            "patch set of {} applied to slide {}",
            set.slide_id,
            slide.slide_id()
        )));
    }
    let m = set.magnification.value();
    let images = set
        .patches
        .iter()
        .map(|&(x, y)| slide.read_region(m, x as i64, y as i64, set.patch_size, set.patch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(SlidePatches {
        slide_id: set.slide_id.clone(),
        label: set.label,
        magnification: set.magnification,
        subsampled: set.subsampled,
        images,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfEpoch {
    pub epoch: u32,
    pub train_loss: f64,
    /// Slide-level AUC on the validation slides; absent when undefined.
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfMeta {
    pub schema_version: u32,
    pub magnification: Magnification,
    pub model: ResNetConfig,
    pub config_hash: String,
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub class_weights: PatchClassWeights,
    pub train_slides: usize,
    pub val_slides: usize,
    pub val_auc: Option<f64>,
    pub selected_epoch: u32,
    pub history: Vec<ClfEpoch>,
    pub params_hash: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct ClfCheckpoint {
    pub meta: ClfMeta,
    pub params: BTreeMap<String, Tensor>,
}

impl ClfCheckpoint {
    pub fn hash(&self) -> &str {
        &self.meta.params_hash
    }

    pub fn instantiate(&self) -> Result<ClfModel> {
        let net = ResNet18::new(&self.meta.model, DType::F32, 0)?;
        net.store().restore(&self.params)?;
        Ok(ClfModel {
            meta: self.meta.clone(),
            net,
        })
    }

    /// Writes `params.safetensors` and `meta.json`; refuses to replace an
    /// existing checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if dir.join("meta.json").exists() {
            return Err(Error::Conflict(format!("checkpoint {} already exists", dir.display())));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensors(&dir.join("params.safetensors"), &self.params)?;
        raster::write_json(&dir.join("meta.json"), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.is_file() {
            return Err(Error::NotFound(format!("classifier checkpoint {}", dir.display())));
        }
        let meta: ClfMeta = raster::read_json(&meta_path)?;
        if meta.schema_version != CLF_SCHEMA_VERSION {
            return Err(Error::Format(format!("classifier schema {} unsupported", meta.schema_version)));
        }
        let params = load_tensors(&dir.join("params.safetensors"))?;
        if tensor_map_hash(&params)? != meta.params_hash {
            return Err(Error::Invariant(format!("parameters in {} do not match meta.json", dir.display())));
        }
        Ok(Self { meta, params })
    }
}

/// A classifier ready for prediction.
pub struct ClfModel {
    pub meta: ClfMeta,
    net: ResNet18,
}

fn class_probabilities(net: &ResNet18, images: &[&RgbImage]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = images_to_tensor(chunk, DType::F32)?;
        let p = softmax_last(&net.forward(&x, false)?)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        out.extend(p.into_iter().map(|r| [r[0], r[1]]));
    }
    Ok(out)
}

fn brca_probabilities(net: &ResNet18, images: &[&RgbImage]) -> Result<Vec<f64>> {
    Ok(class_probabilities(net, images)?
        .into_iter()
        .map(|p| p[MutationStatus::Brca.index()])
        .collect())
}

impl ClfModel {
    /// Softmax over (nonBRCA, BRCA) for one patch.
    pub fn probabilities(&self, image: &RgbImage) -> Result<[f64; 2]> {
        check_patch(image)?;
        Ok(class_probabilities(&self.net, &[image])?[0])
    }
}

fn check_patch(image: &RgbImage) -> Result<()> {
    if (image.width as usize, image.height as usize) != (PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::Validation(format!(
            "patch is {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}",
            image.width, image.height
        )));
    }
    Ok(())
}

/// Probability of the BRCA class for one patch read at `magnification`.
pub fn predict_patch(model: &ClfModel, image: &RgbImage, magnification: Magnification) -> Result<f64> {
    if magnification != model.meta.magnification {
        return Err(Error::Validation(format!(
            "patch at {magnification} given to a {} model",
            model.meta.magnification
        )));
    }
    check_patch(image)?;
    Ok(brca_probabilities(&model.net, &[image])?[0])
}

pub fn score_slide(model: &ClfModel, slide: &SlidePatches) -> Result<SlideScore> {
    if slide.magnification != model.meta.magnification {
        return Err(Error::Validation(format!(
            "slide {} patches are at {}, the model at {}",
            slide.slide_id, slide.magnification, model.meta.magnification
        )));
    }
    slide.images.iter().try_for_each(check_patch)?;
    let refs: Vec<&RgbImage> = slide.images.iter().collect();
    let scores = brca_probabilities(&model.net, &refs)?;
    aggregate_slide(&slide.slide_id, slide.magnification, &scores)
}

fn slide_auc(net: &ResNet18, slides: &[SlidePatches]) -> Result<Option<f64>> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for s in slides {
        let refs: Vec<&RgbImage> = s.images.iter().collect();
        let p = brca_probabilities(net, &refs)?;
        if let Some(v) = aggregate_slide(&s.slide_id, s.magnification, &p)?.p_slide {
            scores.push(v);
            labels.push(s.label.is_brca());
        }
    }
    Ok(match roc_auc(&scores, &labels)? {
        Measure::Defined(v) => Some(v),
        Measure::Undefined => None,
    })
}

/// Index of the epoch to keep: highest AUC, ties to the earliest. Undefined
/// AUCs rank below every defined one; with none defined the last epoch wins.
pub fn select_by_auc(aucs: &[Option<f64>]) -> usize {
    let mut best: Option<usize> = None;
    for (i, v) in aucs.iter().enumerate() {
        if let Some(v) = v {
            if best.map_or(true, |b| *v > aucs[b].expect("defined")) {
                best = Some(i);
            }
        }
    }
    best.unwrap_or(aucs.len().saturating_sub(1))
}

/// Adam on the class-weighted loss over every training patch, keeping the
/// epoch with the best slide-level validation AUC.
pub fn train_classifier(
    config: &ClfTrainConfig,
    train: &[SlidePatches],
    val: &[SlidePatches],
    progress: &mut dyn FnMut(f64),
) -> Result<ClfCheckpoint> {
    config.validate()?;
    if config.epochs == 0 {
        return Err(Error::Validation("at least one epoch is required".into()));
    }
    for s in train.iter().chain(val) {
        if s.magnification != config.magnification {
            return Err(Error::Validation(format!(
                "slide {} patches are at {}, training is at {}",
                s.slide_id, s.magnification, config.magnification
            )));
        }
        s.images.iter().try_for_each(check_patch)?;
    }
    let pool: Vec<(&RgbImage, u32)> = train
        .iter()
        .flat_map(|s| s.images.iter().map(move |im| (im, s.label.index() as u32)))
        .collect();
    let mut counts = [0u64; 2];
    for &(_, y) in &pool {
        counts[y as usize] += 1;
    }
    let weights = PatchClassWeights::from_counts(counts).map_err(|e| Error::Training(e.to_string()))?;

    let net = ResNet18::new(&config.model, DType::F32, config.seed)?;
    let mut opt = Adam::new(config.lr);
    let trainable: Vec<(String, candle_core::Var)> = net
        .store()
        .trainable()
        .into_iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    let params: Vec<(&str, &candle_core::Var)> = trainable.iter().map(|(n, v)| (n.as_str(), v)).collect();
    let per_epoch = config.samples_per_epoch.unwrap_or(pool.len()).min(pool.len());
    let steps_total = (config.epochs as usize * per_epoch.div_ceil(config.batch_size)).max(1);
    let mut steps = 0usize;
    let mut history: Vec<ClfEpoch> = Vec::new();
    let mut best: Option<BTreeMap<String, Tensor>> = None;

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(per_epoch);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<RgbImage> = chunk
                .iter()
                .map(|&i| match &config.augment {
                    Some(policy) => Transform::sample(policy, rng.gen()).apply_rgb(pool[i].0),
                    None => pool[i].0.clone(),
                })
                .collect();
            let refs: Vec<&RgbImage> = images.iter().collect();
            let targets: Vec<u32> = chunk.iter().map(|&i| pool[i].1).collect();
            let logits = net.forward(&images_to_tensor(&refs, DType::F32)?, true)?;
            let loss = weighted_cross_entropy_rows(&logits, &targets, &weights.w)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Training(format!("loss became {value} at epoch {epoch}, batch {batches}")));
            }
            opt.step(&params, &loss.backward()?)?;
            loss_sum += value;
            batches += 1;
            steps += 1;
            progress(steps as f64 / steps_total as f64);
        }
        if net.store().any_non_finite()? {
            return Err(Error::Training(format!("parameters diverged in epoch {epoch}")));
        }
        let auc = slide_auc(&net, val)?;
        let train_loss = loss_sum / batches.max(1) as f64;
        log::info!("{} epoch {epoch}: loss {train_loss:.5} val auc {auc:?}", config.magnification);
        history.push(ClfEpoch {
            epoch,
            train_loss,
            val_auc: auc,
        });
        let aucs: Vec<Option<f64>> = history.iter().map(|h| h.val_auc).collect();
        if select_by_auc(&aucs) + 1 == epoch as usize {
            best = Some(net.store().snapshot()?);
        }
    }
    progress(1.0);
    let aucs: Vec<Option<f64>> = history.iter().map(|h| h.val_auc).collect();
    let selected = select_by_auc(&aucs);
    let params = best.expect("an epoch is always selected");
    Ok(ClfCheckpoint {
        meta: ClfMeta {
            schema_version: CLF_SCHEMA_VERSION,
            magnification: config.magnification,
            model: config.model.clone(),
            config_hash: config.hash(),
            lr: config.lr,
            epochs: config.epochs,
            batch_size: config.batch_size,
            seed: config.seed,
            class_weights: weights,
            train_slides: train.len(),
            val_slides: val.len(),
            val_auc: history[selected].val_auc,
            selected_epoch: selected as u32 + 1,
            params_hash: tensor_map_hash(&params)?,
            history,
            created_at: Utc::now(),
        },
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Validation,
    Test,
}

/// Slide-level evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub split: EvalSplit,
    pub magnification: Magnification,
    pub auc: Measure,
    pub slides: usize,
    /// Cancer patches scored across the split.
    pub patches: usize,
    pub unscorable: Vec<String>,
    pub scores: Vec<(SlideScore, MutationStatus)>,
}

/// Scores every patch of every slide (evaluation never subsamples) and
/// computes slide-level AUCs for the validation and test splits.
pub fn evaluate_cohort(model: &ClfModel, val: &[SlidePatches], test: &[SlidePatches]) -> Result<Vec<CohortRow>> {
    let mut rows = Vec::new();
    for (split, slides) in [(EvalSplit::Validation, val), (EvalSplit::Test, test)] {
        if let Some(s) = slides.iter().find(|s| s.subsampled) {
            return Err(Error::Contract(format!("evaluation slide {} was subsampled", s.slide_id)));
        }
        let mut scores = Vec::new();
        for s in slides {
            scores.push((score_slide(model, s)?, s.label));
        }
        let unscorable: Vec<String> = scores
            .iter()
            .filter(|(s, _)| !s.is_scorable())
            .map(|(s, _)| s.slide_id.clone())
            .collect();
        if !unscorable.is_empty() {
            log::warn!("{} {split:?} slides excluded as unscorable", unscorable.len());
        }
        let (p, l): (Vec<f64>, Vec<bool>) = scores
            .iter()
            .filter_map(|(s, y)| s.p_slide.map(|p| (p, y.is_brca())))
            .unzip();
        rows.push(CohortRow {
            split,
            magnification: model.meta.magnification,
            auc: roc_auc(&p, &l)?,
            slides: slides.len(),
            patches: slides.iter().map(|s| s.images.len()).sum(),
            unscorable,
            scores,
        });
    }
    Ok(rows)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Validation and test AUCs per magnification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub schema_version: u32,
    pub rows: Vec<CohortRow>,
}

impl CohortReport {
    pub fn new(mut rows: Vec<CohortRow>) -> Self {
        rows.sort_by_key(|r| (r.split, r.magnification));
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            rows,
        }
    }

    pub fn auc(&self, split: EvalSplit, magnification: Magnification) -> Option<Measure> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.magnification == magnification)
            .map(|r| r.auc)
    }

    /// Rows per split, one column per magnification; `-` where no model
    /// was evaluated and `n/a` where the AUC is undefined.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16}", "");
        for m in Magnification::ALL {
            out += &format!("{:>8}", format!("M_{m}"));
        }
        out.push('\n');
        for (split, name) in [(EvalSplit::Validation, "Validation AUC"), (EvalSplit::Test, "Test AUC")] {
            out += &format!("{name:<16}");
            for m in Magnification::ALL {
                let cell = self.auc(split, m).map_or("-".to_string(), |a| a.to_string());
                out += &format!("{cell:>8}");
            }
            out.push('\n');
        }
        let unscorable: usize = self.rows.iter().map(|r| r.unscorable.len()).sum();
        if unscorable > 0 {
            out += &format!("unscorable slides excluded: {unscorable}\n");
        }
        out
    }
}
