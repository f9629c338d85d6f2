//! brca-extract, brca-train, brca-predict and brca-eval.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dial_core::mutation::{
    evaluate_cohort, extract_cancer_patches, load_slide_patches, score_slide, subsample, train_classifier,
    CancerPatchSet, ClfCheckpoint, ClfModel, ClfTrainConfig, CohortReport, Magnification, MutationStatus, PatchCaps,
    SlidePatches,
};
use dial_core::patch::Split;
use dial_core::segnet::{to_binary, SegmentationMask};

use crate::seg::MODEL_DIR;
use crate::{check_schema, default_schema, prepare_out, usage, Report, ResolvedSlide, SlideSource, CONFIG_SCHEMA_VERSION};

fn default_mags() -> Vec<Magnification> {
    Magnification::ALL.to_vec()
}

fn label(s: &ResolvedSlide) -> anyhow::Result<MutationStatus> {
    s.label
        .ok_or_else(|| usage(format!("slide {} has no mutation label; take slides from a cohort", s.slide_id)))
}

pub fn patch_set_path(patches: &Path, mag: Magnification, slide_id: &str) -> PathBuf {
    patches.join(mag.to_string()).join(format!("{slide_id}.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrcaExtractCmd {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub data: SlideSource,
    #[serde(default = "default_mags")]
    pub magnifications: Vec<Magnification>,
    /// seg-infer output whose carcinoma class defines cancer regions;
    /// ground truth when unset.
    #[serde(default)]
    pub masks: Option<PathBuf>,
}

/// Writes every cancer patch of every slide to `out/{mag}/{slide}.jsonl`.
pub fn brca_extract(cmd: &BrcaExtractCmd, out: &Path) -> anyhow::Result<Report> {
    check_schema(cmd.schema_version)?;
    if cmd.magnifications.is_empty() {
        return Err(usage("`magnifications` is empty"));
    }
    let slides = cmd.data.resolve()?;
    prepare_out(out, "brca-extract", cmd)?;
    let mut rows = Vec::new();
    let mut text = format!("{:<12}{:>8}", "Slide", "Label");
    for m in &cmd.magnifications {
        text.push_str(&format!("{:>8}", m.to_string()));
    }
    text.push('\n');
    for s in &slides {
        let status = label(s)?;
        let slide = s.open()?;
        let mask = match &cmd.masks {
            Some(dir) => {
                let seg = SegmentationMask::load(&dir.join(&s.slide_id))
                    .with_context(|| format!("no segmentation of {} in {}", s.slide_id, dir.display()))?;
                to_binary(&seg.classes)
            }
            None => to_binary(&s.ground_truth()?),
        };
        let mut counts = serde_json::Map::new();
        text.push_str(&format!("{:<12}{:>8}", s.slide_id, if status.is_brca() { "BRCA" } else { "non" }));
        for &m in &cmd.magnifications {
            let set = extract_cancer_patches(&slide, &mask, m, status)?;
            set.save(&patch_set_path(out, m, &s.slide_id))?;
            counts.insert(m.to_string(), set.len().into());
            text.push_str(&format!("{:>8}", set.len()));
        }
        text.push('\n');
        rows.push(json!({"slide_id": s.slide_id, "label": status, "split": s.split, "patches": counts}));
    }
    let json = json!({"schema_version": CONFIG_SCHEMA_VERSION, "slides": rows});
    Ok(Report::new(json, text.trim_end()))
}

fn load_patches(s: &ResolvedSlide, patches: &Path, mag: Magnification) -> anyhow::Result<(CancerPatchSet, SlidePatches)> {
    let path = patch_set_path(patches, mag, &s.slide_id);
    let set = CancerPatchSet::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if set.label != label(s)? {
        return Err(usage(format!("{} disagrees with the cohort label of {}", path.display(), s.slide_id)));
    }
    let p = load_slide_patches(&s.open()?, &set)?;
    Ok((set, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrcaTrainCmd {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub data: SlideSource,
    /// brca-extract output.
    pub patches: PathBuf,
    pub training: ClfTrainConfig,
    #[serde(default)]
    pub caps: PatchCaps,
}

/// Trains on the train split (subsampled to the caps) and selects on the
/// full validation split.
pub fn brca_train(cmd: &BrcaTrainCmd, out: &Path) -> anyhow::Result<Report> {
    check_schema(cmd.schema_version)?;
    let config = ClfTrainConfig {
        seed: cmd.seed,
        ..cmd.training.clone()
    };
    config.validate()?;
    let slides = cmd.data.resolve()?;
    let resolved = BrcaTrainCmd {
        training: config.clone(),
        ..cmd.clone()
    };
    prepare_out(out, "brca-train", &resolved)?;
    let mag = config.magnification;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let mut train_counts = Vec::new();
    for (i, s) in slides.iter().enumerate() {
        match s.split {
            Split::Train => {
                let path = patch_set_path(&cmd.patches, mag, &s.slide_id);
                let full = CancerPatchSet::load(&path).with_context(|| format!("loading {}", path.display()))?;
                if full.label != label(s)? {
                    return Err(usage(format!("{} disagrees with the cohort label of {}", path.display(), s.slide_id)));
                }
                let set = subsample(&full, &cmd.caps, cmd.seed.wrapping_add(i as u64));
                set.save(&patch_set_path(&out.join("train_patches"), mag, &s.slide_id))?;
                train_counts.push(json!({"slide_id": s.slide_id, "extracted": full.len(), "used": set.len()}));
                train.push(load_slide_patches(&s.open()?, &set)?);
            }
            Split::Val => val.push(load_patches(s, &cmd.patches, mag)?.1),
            Split::Test => {}
        }
    }
    let ck = train_classifier(&config, &train, &val, &mut |_| {})?;
    ck.save(&out.join(MODEL_DIR))?;
    let m = &ck.meta;
    let auc = m.val_auc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let text = format!(
        "{} classifier {} (epoch {}, validation AUC {auc}, class weights {:.4}/{:.4}) saved to {}",
        mag,
        &ck.hash()[..12],
        m.selected_epoch,
        m.class_weights.w[0],
        m.class_weights.w[1],
        out.join(MODEL_DIR).display()
    );
    let json = json!({
        "schema_version": CONFIG_SCHEMA_VERSION,
        "hash": ck.hash(),
        "magnification": mag,
        "val_auc": m.val_auc,
        "selected_epoch": m.selected_epoch,
        "class_weights": m.class_weights,
        "history": m.history,
        "train_patches": train_counts,
    });
    Ok(Report::new(json, text))
}

fn load_model(dir: &Path) -> anyhow::Result<ClfModel> {
    let ck = ClfCheckpoint::load(dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok(ck.instantiate()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrcaPredictCmd {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// Classifier checkpoint directory.
    pub model: PathBuf,
    pub data: SlideSource,
    pub patches: PathBuf,
}

/// Slide scores over every extracted patch; slides without cancer patches
/// are reported as unscorable.
pub fn brca_predict(cmd: &BrcaPredictCmd, out: Option<&Path>) -> anyhow::Result<Report> {
    check_schema(cmd.schema_version)?;
    let model = load_model(&cmd.model)?;
    let mag = model.meta.magnification;
    let mut rows = Vec::new();
    let mut text = format!("{:<12}{:>8}{:>8}{:>10}\n", "Slide", "Label", "Patches", "P(BRCA)");
    for s in cmd.data.resolve()? {
        let (_, patches) = load_patches(&s, &cmd.patches, mag)?;
        let score = score_slide(&model, &patches)?;
        text.push_str(&format!(
            "{:<12}{:>8}{:>8}{:>10}\n",
            s.slide_id,
            if patches.label.is_brca() { "BRCA" } else { "non" },
            score.n,
            score.p_slide.map_or("UNSCORABLE".to_string(), |p| format!("{p:.4}"))
        ));
        rows.push(json!({
            "slide_id": s.slide_id,
            "label": patches.label,
            "split": s.split,
            "patches": score.n,
            "p_slide": score.p_slide,
            "unscorable": !score.is_scorable(),
        }));
    }
    let json = json!({"schema_version": CONFIG_SCHEMA_VERSION, "magnification": mag, "slides": rows});
    if let Some(out) = out {
        prepare_out(out, "brca-predict", cmd)?;
        dial_core::raster::write_json(&out.join("scores.json"), &json)?;
    }
    Ok(Report::new(json, text.trim_end()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrcaEvalCmd {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// One classifier per magnification.
    pub models: Vec<PathBuf>,
    pub data: SlideSource,
    pub patches: PathBuf,
}

/// Slide-level AUC of each model on the full validation and test splits.
pub fn brca_eval(cmd: &BrcaEvalCmd, out: Option<&Path>) -> anyhow::Result<Report> {
    check_schema(cmd.schema_version)?;
    if cmd.models.is_empty() {
        return Err(usage("`models` is empty"));
    }
    let slides = cmd.data.resolve()?;
    let mut rows = Vec::new();
    let mut mags = Vec::new();
    for dir in &cmd.models {
        let model = load_model(dir)?;
        let mag = model.meta.magnification;
        if mags.contains(&mag) {
            return Err(usage(format!("two models at {mag}")));
        }
        mags.push(mag);
        let (mut val, mut test) = (Vec::new(), Vec::new());
        for s in &slides {
            match s.split {
                Split::Val => val.push(load_patches(s, &cmd.patches, mag)?.1),
                Split::Test => test.push(load_patches(s, &cmd.patches, mag)?.1),
                Split::Train => {}
            }
        }
        rows.extend(evaluate_cohort(&model, &val, &test)?);
    }
    let report = CohortReport::new(rows);
    if let Some(out) = out {
        prepare_out(out, "brca-eval", cmd)?;
        dial_core::raster::write_json(&out.join("brca_eval.json"), &report)?;
    }
    Ok(Report::new(serde_json::to_value(&report)?, report.table().trim_end()))
}
