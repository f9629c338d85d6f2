//! dial-simulate: a DIaL project driven by a scripted annotator that
//! compares each review slide's segmentation with its ground truth and
//! relabels the worst grid cells.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use candle_core::DType;
use serde::{Deserialize, Serialize};

use dial_core::dial::{BootstrapInput, Correction, DialConfig, DialProject, SlideEntry, SlideRole};
use dial_core::metrics::{confusion, ConfusionCounts};
use dial_core::patch::{GridConfig, PatchManifest, Split};
use dial_core::raster::GrayImage;
use dial_core::segnet::{segment_slide, to_binary, Dmmn, LabelMap, SegCheckpoint, CARCINOMA};
use dial_core::slide::{tissue_mask, SlidePyramid, DEFAULT_TISSUE_MAGNIFICATION};

use crate::seg::grid_manifest;
use crate::{check_schema, default_schema, prepare_out, usage, Report, ResolvedSlide, SlideSource, CONFIG_SCHEMA_VERSION};

pub const PROJECT_DIR: &str = "project";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorConfig {
    /// Most cells relabeled on one slide per iteration.
    pub cells_per_slide: usize,
    /// A cell is relabeled only if this share of it is misclassified.
    pub min_error_fraction: f64,
    /// Review slides visited per iteration, in registry order; all when unset.
    pub slides_per_iteration: Option<usize>,
    pub minutes_per_cell: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            cells_per_slide: 6,
            min_error_fraction: 0.02,
            slides_per_iteration: None,
            minutes_per_cell: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestModels {
    None,
    Final,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialSimCmd {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_project_id")]
    pub project_id: String,
    /// Checkpoint installed as M_0.
    pub pretrained: PathBuf,
    /// Annotated source-domain slides kept in every training pool.
    pub bootstrap: SlideSource,
    /// Target-domain slides: train split → review, val → validation, test → held out.
    pub target: SlideSource,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub dial: DialConfig,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default)]
    pub annotator: AnnotatorConfig,
    /// Which models are scored on the held-out slides.
    #[serde(default = "default_test_models")]
    pub test_models: TestModels,
}

fn default_project_id() -> String {
    "dial-sim".into()
}
fn default_iterations() -> u32 {
    3
}
fn default_test_models() -> TestModels {
    TestModels::All
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    /// Round number; the round feeds model `M_{round}`.
    pub round: u32,
    pub corrections: usize,
    pub slides: Vec<String>,
    pub relabeled_pixels: u64,
    pub model: String,
    pub val_iou: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub test: ConfusionCounts,
    pub test_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub project: PathBuf,
    pub rounds: Vec<IterationRow>,
    pub completed: bool,
    pub test_slides: Vec<String>,
    pub models: Vec<ModelScore>,
    pub seconds: f64,
}

impl SimReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<7}{:>12}{:>8}{:>8}{:>10}{:>10}\n", "Round", "Corrections", "Slides", "Model", "Val IOU", "Test IOU");
        let test: BTreeMap<&str, Option<f64>> = self.models.iter().map(|m| (m.model.as_str(), m.test_iou)).collect();
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rounds {
            s.push_str(&format!(
                "{:<7}{:>12}{:>8}{:>8}{:>10}{:>10}\n",
                r.round,
                r.corrections,
                r.slides.len(),
                r.model,
                fmt(r.val_iou),
                fmt(test.get(r.model.as_str()).copied().flatten())
            ));
        }
        if let Some(m0) = self.models.iter().find(|m| m.model == "M0") {
            s.push_str(&format!("M0 test IOU {}\n", fmt(m0.test_iou)));
        }
        if self.completed {
            s.push_str("project marked complete\n");
        }
        s
    }
}

/// Indices of the cells to relabel: cells with the most carcinoma
/// disagreement, at least `min_error_fraction` of the cell, worst first.
/// Cells `annotated` already labels in full are skipped.
pub fn worst_cells(
    pred: &GrayImage,
    truth: &GrayImage,
    annotated: Option<&LabelMap>,
    cell: u32,
    config: &AnnotatorConfig,
) -> Vec<(u32, u32)> {
    let mut scored = Vec::new();
    for y0 in (0..truth.height).step_by(cell as usize) {
        for x0 in (0..truth.width).step_by(cell as usize) {
            let (w, h) = (cell.min(truth.width - x0), cell.min(truth.height - y0));
            if annotated.is_some_and(|a| a.labeled_in(x0 as i64, y0 as i64, w, h) == w as u64 * h as u64) {
                continue;
            }
            let mut wrong = 0u64;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    wrong += ((pred.get(x, y) == CARCINOMA) != (truth.get(x, y) == CARCINOMA)) as u64;
                }
            }
            if wrong > 0 && wrong as f64 >= config.min_error_fraction * (cell as f64 * cell as f64) {
                scored.push((wrong, x0, y0));
            }
        }
    }
    // Worst first; ties in row-major order.
    scored.sort_by(|a, b| b.0.cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    scored.into_iter().take(config.cells_per_slide).map(|(_, x, y)| (x, y)).collect()
}

fn segment(net: &Dmmn, tag: &str, slide: &SlidePyramid) -> anyhow::Result<GrayImage> {
    let mask = tissue_mask(slide, DEFAULT_TISSUE_MAGNIFICATION)?;
    Ok(segment_slide(net, tag, slide, &mask)?.classes)
}

fn role(split: Split) -> SlideRole {
    match split {
        Split::Train => SlideRole::Review,
        Split::Val => SlideRole::Validation,
        Split::Test => SlideRole::Test,
    }
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

/// Creates the project: M_0 installed, source slides and target validation
/// slides fully annotated in the base manifest.
pub fn bootstrap(cmd: &DialSimCmd, root: &Path) -> anyhow::Result<(DialProject, Vec<ResolvedSlide>)> {
    let pretrained = SegCheckpoint::load(&cmd.pretrained).with_context(|| format!("loading {}", cmd.pretrained.display()))?;
    let source = cmd.bootstrap.resolve()?;
    let target = cmd.target.resolve()?;
    let mut entries = Vec::new();
    let mut base_slides = Vec::new();
    for s in &source {
        entries.push(SlideEntry::new(&s.slide_id, absolute(&s.path)?, SlideRole::Bootstrap));
        base_slides.push(ResolvedSlide {
            split: Split::Train,
            ..s.clone()
        });
    }
    for s in &target {
        let mut e = SlideEntry::new(&s.slide_id, absolute(&s.path)?, role(s.split));
        e.stratum = s.label.map(|l| format!("{l:?}"));
        entries.push(e);
        if s.split == Split::Val {
            base_slides.push(s.clone());
        }
    }
    let base: PatchManifest = grid_manifest(&base_slides, &cmd.grid, 0, cmd.seed)?;
    let mut annotations = BTreeMap::new();
    for s in &base_slides {
        annotations.insert(s.slide_id.clone(), LabelMap::from_dense(&s.ground_truth()?)?);
    }
    let mut config = cmd.dial.clone();
    config.training.seed = cmd.seed;
    let project = DialProject::bootstrap(
        root,
        BootstrapInput {
            project_id: cmd.project_id.clone(),
            pretrained: &pretrained,
            slides: entries,
            base_manifest: base,
            base_annotations: annotations,
            config,
        },
    )?;
    Ok((project, target))
}

pub fn dial_simulate(cmd: &DialSimCmd, out: &Path) -> anyhow::Result<Report> {
    check_schema(cmd.schema_version)?;
    cmd.dial.validate()?;
    if cmd.target.is_empty() {
        return Err(usage("`target` names no slides"));
    }
    prepare_out(out, "dial-simulate", cmd)?;
    let started = Instant::now();
    let root = out.join(PROJECT_DIR);
    let (mut project, target) = bootstrap(cmd, &root)?;
    let review: Vec<&ResolvedSlide> = target.iter().filter(|s| s.split == Split::Train).collect();
    let test: Vec<&ResolvedSlide> = target.iter().filter(|s| s.split == Split::Test).collect();
    let cell = cmd.dial.training.model.patch as u32;
    let mut truth: BTreeMap<String, GrayImage> = BTreeMap::new();
    for s in review.iter().chain(&test) {
        truth.insert(s.slide_id.clone(), s.ground_truth()?);
    }
    let mut rounds = Vec::new();
    let mut completed = false;
    for _ in 0..cmd.iterations {
        let t = Instant::now();
        let iteration = project.open_iteration().context("no open iteration")?;
        let current = project.current_model().clone();
        let net = project.load_model(current.iteration)?.instantiate(DType::F32)?;
        let mut row = IterationRow {
            round: iteration + 1,
            corrections: 0,
            slides: Vec::new(),
            relabeled_pixels: 0,
            model: String::new(),
            val_iou: None,
            seconds: 0.0,
        };
        let visit = cmd.annotator.slides_per_iteration.unwrap_or(review.len());
        for s in review.iter().take(visit) {
            let slide = project.slide(&s.slide_id)?;
            let pred = segment(&net, &current.tag, &slide)?;
            let gt = &truth[&s.slide_id];
            let cells = worst_cells(&pred, gt, project.annotation(&s.slide_id), cell, &cmd.annotator);
            for (x0, y0) in cells {
                let (w, h) = (cell.min(gt.width - x0), cell.min(gt.height - y0));
                let delta = gt.crop_padded(x0 as i64, y0 as i64, w, h, 0);
                let ingested = project.ingest_correction(Correction {
                    slide_id: s.slide_id.clone(),
                    x0,
                    y0,
                    delta,
                    author: "scripted".into(),
                    duration_minutes: cmd.annotator.minutes_per_cell,
                    session_id: None,
                    iteration: Some(iteration),
                })?;
                row.corrections += 1;
                row.relabeled_pixels += ingested.changed;
                if row.slides.last() != Some(&s.slide_id) {
                    row.slides.push(s.slide_id.clone());
                }
            }
        }
        if row.corrections == 0 {
            log::info!("no cell needs relabeling; marking {} final", current.tag);
            project.complete()?;
            completed = true;
            break;
        }
        let spec = project.close_iteration()?;
        log::info!("round {}: {} corrections, training {}", row.round, row.corrections, spec.target_tag);
        let ck = project.prepare_job(&spec)?.run(&mut |_| {})?;
        project.install_model(&spec, &ck)?;
        row.model = ck.meta.tag.clone();
        row.val_iou = ck.meta.val_iou;
        row.seconds = t.elapsed().as_secs_f64();
        log::info!("round {} done in {:.0}s, val IOU {:?}", row.round, row.seconds, row.val_iou);
        rounds.push(row);
    }
    let scored: Vec<_> = match cmd.test_models {
        TestModels::None => Vec::new(),
        TestModels::Final => vec![project.current_model().clone()],
        TestModels::All => project.models().to_vec(),
    };
    let mut models = Vec::new();
    if !test.is_empty() {
        for m in scored {
            let net = project.load_model(m.iteration)?.instantiate(DType::F32)?;
            let mut counts = ConfusionCounts::default();
            for s in &test {
                let pred = segment(&net, &m.tag, &project.slide(&s.slide_id)?)?;
                counts = counts + confusion(&to_binary(&pred), &to_binary(&truth[&s.slide_id]))?;
            }
            let iou = counts.iou();
            models.push(ModelScore {
                model: m.tag.clone(),
                test: counts,
                test_iou: iou.is_defined().then(|| iou.value()),
            });
        }
    }
    let report = SimReport {
        schema_version: CONFIG_SCHEMA_VERSION,
        project: root,
        rounds,
        completed,
        test_slides: test.iter().map(|s| s.slide_id.clone()).collect(),
        models,
        seconds: started.elapsed().as_secs_f64(),
    };
    dial_core::raster::write_json(&out.join("report.json"), &report)?;
    Ok(Report::new(serde_json::to_value(&report)?, report.table().trim_end()))
}
