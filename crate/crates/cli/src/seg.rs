//! seg-train, seg-finetune, seg-infer and seg-eval.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dial_core::metrics::{confusion, seg_table, SegReport};
use dial_core::patch::{enumerate_grid, GridConfig, ManifestEntry, PatchManifest, Split};
use dial_core::segnet::{
    segment_slide, to_binary, LabelMap, SegCheckpoint, SegTrainConfig, SegmentationMask, TrainingPool, FINETUNE_LR,
    TRAIN_LR,
};
use dial_core::slide::{tissue_mask, DEFAULT_TISSUE_MAGNIFICATION};

use crate::{check_schema, default_schema, prepare_out, usage, Report, ResolvedSlide, SlideSource, CONFIG_SCHEMA_VERSION};

pub const MODEL_DIR: &str = "model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegTrainCmd {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Fully annotated slides; their splits pick training and selection patches.
    pub data: SlideSource,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub training: SegTrainConfig,
    /// Checkpoint to finetune from (seg-finetune only).
    #[serde(default)]
    pub init: Option<PathBuf>,
}

/// Grid entries over tissue of `slides`, each in its slide's split. Test
/// slides are left out.
pub fn grid_manifest(slides: &[ResolvedSlide], grid: &GridConfig, version: u64, seed: u64) -> anyhow::Result<PatchManifest> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for s in slides.iter().filter(|s| s.split != Split::Test) {
        let slide = s.open()?;
        let mask = tissue_mask(&slide, DEFAULT_TISSUE_MAGNIFICATION)?;
        let m = enumerate_grid(&slide, &mask, grid)?;
        entries.extend(m.entries.into_iter().map(|e| ManifestEntry { split: s.split, ..e }));
    }
    Ok(PatchManifest::new(version, seed, entries)?)
}

/// Pyramids and full annotations for every slide in `slides`.
pub fn full_pool(slides: &[ResolvedSlide]) -> anyhow::Result<TrainingPool> {
    let mut pool = TrainingPool::default();
    for s in slides {
        pool.slides.insert(s.slide_id.clone(), s.open()?);
        pool.annotations.insert(s.slide_id.clone(), LabelMap::from_dense(&s.ground_truth()?)?);
    }
    Ok(pool)
}

fn run_seg_training(cmd: &SegTrainCmd, out: &Path, name: &str, finetune: bool) -> anyhow::Result<Report> {
    check_schema(cmd.schema_version)?;
    let mut training = SegTrainConfig {
        seed: cmd.seed,
        ..cmd.training.clone()
    };
    training.validate()?;
    let init = match (&cmd.init, finetune) {
        (Some(p), true) => Some(SegCheckpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        (None, true) => return Err(usage("seg-finetune needs `init`")),
        (Some(_), false) => return Err(usage("seg-train starts from random parameters; use seg-finetune with `init`")),
        (None, false) => None,
    };
    training.lr = Some(training.lr.unwrap_or(if finetune { FINETUNE_LR } else { TRAIN_LR }));
    if cmd.data.is_empty() {
        return Err(usage("`data` names no slides"));
    }
    let resolved = SegTrainCmd {
        training: training.clone(),
        ..cmd.clone()
    };
    prepare_out(out, name, &resolved)?;
    let slides = cmd.data.resolve()?;
    let manifest = grid_manifest(&slides, &cmd.grid, 0, cmd.seed)?;
    manifest.save(&out.join("manifest.jsonl"))?;
    let pool = full_pool(&slides)?;
    let ck = dial_core::segnet::train_segmentation(&training, &manifest, &pool, init.as_ref())?;
    ck.save(&out.join(MODEL_DIR))?;
    let m = &ck.meta;
    let json = json!({
        "schema_version": CONFIG_SCHEMA_VERSION,
        "tag": m.tag,
        "hash": ck.hash(),
        "val_iou": m.val_iou,
        "selection_set": m.selection_set,
        "selected_epoch": m.selected_epoch,
        "history": m.history,
        "train_patches": manifest.in_split(Split::Train).count(),
        "val_patches": manifest.in_split(Split::Val).count(),
    });
    let iou = m.val_iou.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let text = format!(
        "{} {} (epoch {}, {} IOU {iou}) saved to {}",
        m.tag,
        &ck.hash()[..12],
        m.selected_epoch,
        m.selection_set,
        out.join(MODEL_DIR).display()
    );
    Ok(Report::new(json, text))
}

pub fn seg_train(cmd: &SegTrainCmd, out: &Path) -> anyhow::Result<Report> {
    run_seg_training(cmd, out, "seg-train", false)
}

pub fn seg_finetune(cmd: &SegTrainCmd, out: &Path) -> anyhow::Result<Report> {
    run_seg_training(cmd, out, "seg-finetune", true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegInferCmd {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// Checkpoint directory.
    pub model: PathBuf,
    pub data: SlideSource,
    #[serde(default = "default_tissue_mag")]
    pub tissue_magnification: f64,
}

fn default_tissue_mag() -> f64 {
    DEFAULT_TISSUE_MAGNIFICATION
}

/// Writes one segmentation per slide to `out/{slide_id}`.
pub fn seg_infer(cmd: &SegInferCmd, out: &Path) -> anyhow::Result<Report> {
    check_schema(cmd.schema_version)?;
    let ck = SegCheckpoint::load(&cmd.model).with_context(|| format!("loading {}", cmd.model.display()))?;
    prepare_out(out, "seg-infer", cmd)?;
    let net = ck.instantiate(DType::F32)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    for s in cmd.data.resolve()? {
        let slide = s.open()?;
        let mask = tissue_mask(&slide, cmd.tissue_magnification)?;
        let seg = segment_slide(&net, &ck.meta.tag, &slide, &mask)?;
        seg.save(&out.join(&s.slide_id), slide.meta().tile_size)?;
        let cancer = to_binary(&seg.classes).data.iter().filter(|&&v| v == 1).count();
        let frac = cancer as f64 / seg.classes.data.len().max(1) as f64;
        text.push_str(&format!("{}: carcinoma fraction {frac:.4}\n", s.slide_id));
        rows.push(json!({"slide_id": s.slide_id, "carcinoma_fraction": frac}));
    }
    let json = json!({"schema_version": CONFIG_SCHEMA_VERSION, "model": ck.meta.tag, "hash": ck.hash(), "slides": rows});
    Ok(Report::new(json, text.trim_end()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegEvalCmd {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// seg-infer output directories, one per model.
    pub predictions: Vec<PathBuf>,
    /// Slides with ground truth.
    pub data: SlideSource,
}

/// Binary carcinoma IOU/recall/precision of each prediction set, pooled
/// over the slides.
pub fn seg_eval(cmd: &SegEvalCmd, out: Option<&Path>) -> anyhow::Result<Report> {
    check_schema(cmd.schema_version)?;
    if cmd.predictions.is_empty() {
        return Err(usage("`predictions` is empty"));
    }
    let slides = cmd.data.resolve()?;
    let mut truth = BTreeMap::new();
    for s in &slides {
        truth.insert(s.slide_id.clone(), to_binary(&s.ground_truth()?));
    }
    let mut reports = Vec::new();
    for dir in &cmd.predictions {
        let mut per_slide = Vec::new();
        let mut model = None;
        for s in &slides {
            let seg = SegmentationMask::load(&dir.join(&s.slide_id))
                .with_context(|| format!("no prediction for {} in {}", s.slide_id, dir.display()))?;
            model.get_or_insert_with(|| seg.model_tag.clone());
            per_slide.push((s.slide_id.clone(), confusion(&to_binary(&seg.classes), &truth[&s.slide_id])?));
        }
        let name = model.unwrap_or_else(|| dir.display().to_string());
        reports.push(SegReport::new(&name, per_slide));
    }
    if let Some(out) = out {
        prepare_out(out, "seg-eval", cmd)?;
        dial_core::raster::write_json(&out.join("seg_eval.json"), &reports)?;
    }
    let json = json!({"schema_version": CONFIG_SCHEMA_VERSION, "models": reports});
    Ok(Report::new(json, seg_table(&reports).trim_end()))
}
