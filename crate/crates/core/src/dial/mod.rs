//! Deep interactive learning ledger: iterations of segment, assess, correct
//! and finetune over a project directory.
//!
//! Project layout:
//!
//! ```text
//! project.json                 registry and training configuration
//! corrections.log              hash-chained event log (source of truth)
//! corrections/{id}.png|.json   correction deltas and their records
//! annotations/{slide}.lbl      cumulative corrections per slide (derived)
//! base/{slide}.lbl             bootstrap-domain and validation annotations
//! manifests/v{n}.jsonl         training-set manifest after n corrections
//! checkpoints/M{k}/            installed models
//! segmentations/{slide}/{tag}/ slide segmentations for review
//! ```
//!
//! Iteration `k` is open while `M_k` is being reviewed. Its corrections feed
//! the job that produces `M_{k+1}`: a fresh training run when `k == 0`, a
//! finetune from `M_k` afterwards. Everything except `project.json`, the
//! base annotations and the checkpoints is reconstructed from the log when
//! a project is opened.

mod ledger;
mod replay;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{ManifestEntry, PatchManifest, Split};
use crate::raster::{self, GrayImage};
use crate::segnet::{
    is_valid_label, run_training, LabelMap, Lineage, SegCheckpoint, SegTrainConfig, Start, TrainingPool, FINETUNE_LR,
    TRAIN_LR, UNLABELED,
};
use crate::slide::{open_slide, SlidePyramid};

pub use ledger::{check_chain, read_log, CorrectionRecord, Event, LogRecord, SessionRecord, GENESIS, LOG_FILE};
pub use replay::{annotations_digest, verify_project, LineageLink, ReplayReport};

pub const PROJECT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideRole {
    /// Annotated source-domain slide that stays in every training pool.
    Bootstrap,
    /// Target-domain slide the annotator reviews and corrects.
    Review,
    /// Annotated slide used for model selection.
    Validation,
    /// Held out from training and selection.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub slide_id: String,
    /// Pyramid directory; relative paths resolve against the project root.
    pub path: PathBuf,
    pub role: SlideRole,
    #[serde(default)]
    pub stratum: Option<String>,
    /// Base-magnification size, filled in at bootstrap.
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
}

impl SlideEntry {
    pub fn new(slide_id: impl Into<String>, path: impl Into<PathBuf>, role: SlideRole) -> Self {
        Self {
            slide_id: slide_id.into(),
            path: path.into(),
            role,
            stratum: None,
            width: 0,
            height: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DialConfig {
    /// Loop settings shared by every job; its `lr` must be left unset.
    pub training: SegTrainConfig,
    /// Rate for the fresh training run that produces `M_1`.
    pub train_lr: f64,
    /// Rate for every later finetune.
    pub finetune_lr: f64,
}

impl Default for DialConfig {
    fn default() -> Self {
        Self {
            training: SegTrainConfig::default(),
            train_lr: TRAIN_LR,
            finetune_lr: FINETUNE_LR,
        }
    }
}

impl DialConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.training.lr.is_some() {
            return Err(Error::Validation(
                "set train_lr/finetune_lr instead of training.lr".into(),
            ));
        }
        for lr in [self.train_lr, self.finetune_lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Validation(format!("learning rate {lr} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectMeta {
    pub schema_version: u32,
    pub project_id: String,
    pub created_at: DateTime<Utc>,
    pub slides: Vec<SlideEntry>,
    pub config: DialConfig,
}

impl ProjectMeta {
    pub fn slide(&self, slide_id: &str) -> Option<&SlideEntry> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobMode {
    Train,
    Finetune,
}

/// Everything a worker needs to produce the next model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub project_id: String,
    /// Iteration being closed; the job produces `M_{iteration + 1}`.
    pub iteration: u32,
    pub target_tag: String,
    pub mode: JobMode,
    pub parent_tag: String,
    pub parent_hash: String,
    pub manifest_version: u64,
    pub config: SegTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Phase {
    Open { iteration: u32 },
    Training { job: Box<JobSpec> },
    Complete { iteration: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstalledModel {
    pub iteration: u32,
    pub tag: String,
    pub hash: String,
    pub parent_hash: Option<String>,
}

/// A proposed annotation change: `delta` placed at (x0, y0) in base pixels,
/// UNLABELED marking pixels it leaves alone.
#[derive(Debug, Clone)]
pub struct Correction {
    pub slide_id: String,
    pub x0: u32,
    pub y0: u32,
    pub delta: GrayImage,
    pub author: String,
    pub duration_minutes: f64,
    pub session_id: Option<String>,
    /// When set, must equal the open iteration.
    pub iteration: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ingested {
    pub correction_id: String,
    pub manifest_version: u64,
    pub labeled: u64,
    pub changed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlideStatus {
    Unreviewed,
    /// Corrected while reviewing `M_{k-1}`, i.e. feeding `M_k`.
    Corrected(u32),
    Complete,
}

impl std::fmt::Display for SlideStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SlideStatus::Unreviewed => write!(f, "unreviewed"),
            SlideStatus::Corrected(k) => write!(f, "corrected@{k}"),
            SlideStatus::Complete => write!(f, "complete"),
        }
    }
}

impl Serialize for SlideStatus {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Minutes and corrected slides per round; round `k` produced `M_k`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoundTime {
    pub iteration: u32,
    pub minutes: f64,
    pub corrections: usize,
    pub slides: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimeReport {
    pub total_minutes: f64,
    pub rounds: Vec<RoundTime>,
    pub distinct_slides: usize,
}

impl TimeReport {
    pub fn total_hours(&self) -> f64 {
        self.total_minutes / 60.0
    }
}

/// State rebuilt from the event log.
#[derive(Debug, Clone)]
pub struct LedgerState {
    pub project_id: String,
    pub phase: Phase,
    pub models: Vec<InstalledModel>,
    pub corrections: Vec<CorrectionRecord>,
    pub sessions: Vec<SessionRecord>,
    pub failures: Vec<(u32, String)>,
    pub annotations: BTreeMap<String, LabelMap>,
    pub manifest_version: u64,
}

impl LedgerState {
    fn open_iteration(&self) -> Option<u32> {
        match self.phase {
            Phase::Open { iteration } => Some(iteration),
            _ => None,
        }
    }

    fn corrections_in(&self, iteration: u32) -> usize {
        self.corrections.iter().filter(|c| c.iteration == iteration).count()
    }
}

/// Inputs to [`DialProject::bootstrap`].
pub struct BootstrapInput<'a> {
    pub project_id: String,
    pub pretrained: &'a SegCheckpoint,
    pub slides: Vec<SlideEntry>,
    /// Bootstrap-domain training entries and validation entries; kept in
    /// every later manifest.
    pub base_manifest: PatchManifest,
    /// Annotations for the slides named in `base_manifest`.
    pub base_annotations: BTreeMap<String, LabelMap>,
    pub config: DialConfig,
}

pub struct DialProject {
    root: PathBuf,
    meta: ProjectMeta,
    base_manifest: PatchManifest,
    state: LedgerState,
    head: String,
    seq: u64,
    slides: Mutex<BTreeMap<String, SlidePyramid>>,
}

impl std::fmt::Debug for DialProject {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DialProject")
            .field("root", &self.root)
            .field("project_id", &self.meta.project_id)
            .field("phase", &self.state.phase)
            .finish()
    }
}

fn correction_png(root: &Path, id: &str) -> PathBuf {
    root.join("corrections").join(format!("{id}.png"))
}

fn annotation_path(root: &Path, slide_id: &str) -> PathBuf {
    root.join("annotations").join(format!("{slide_id}.lbl"))
}

fn base_annotation_path(root: &Path, slide_id: &str) -> PathBuf {
    root.join("base").join(format!("{slide_id}.lbl"))
}

pub fn manifest_path(root: &Path, version: u64) -> PathBuf {
    root.join("manifests").join(format!("v{version}.jsonl"))
}

pub fn checkpoint_dir(root: &Path, iteration: u32) -> PathBuf {
    root.join("checkpoints").join(format!("M{iteration}"))
}

fn read_project_meta(root: &Path) -> Result<ProjectMeta> {
    let path = root.join("project.json");
    if !path.is_file() {
        return Err(Error::NotFound(format!("no project at {}", root.display())));
    }
    let meta: ProjectMeta = raster::read_json(&path)?;
    if meta.schema_version != PROJECT_SCHEMA_VERSION {
        return Err(Error::Format(format!("project schema {} unsupported", meta.schema_version)));
    }
    Ok(meta)
}

/// Test hook: abort the process at a named point when `DIAL_CRASH_AT` says so.
fn crash_point(name: &str) {
    if std::env::var("DIAL_CRASH_AT").is_ok_and(|v| v == name) {
        std::process::abort();
    }
}

/// Manifest after the given corrections: the base entries plus one training
/// entry per patch-sized grid cell holding a corrected pixel.
pub(crate) fn derive_manifest(
    base: &PatchManifest,
    annotations: &BTreeMap<String, LabelMap>,
    patch: usize,
    version: u64,
) -> Result<PatchManifest> {
    let patch = patch as u32;
    let mut entries = base.entries.clone();
    let taken: BTreeSet<(String, (i64, i64))> = entries.iter().map(|e| (e.slide_id.clone(), e.center)).collect();
    for (slide_id, ann) in annotations {
        for row in 0..ann.height.div_ceil(patch) {
            for col in 0..ann.width.div_ceil(patch) {
                let (x, y) = (col * patch, row * patch);
                if ann.labeled_in(x as i64, y as i64, patch, patch) == 0 {
                    continue;
                }
                let center = ((x + patch / 2) as i64, (y + patch / 2) as i64);
                if !taken.contains(&(slide_id.clone(), center)) {
                    entries.push(ManifestEntry {
                        slide_id: slide_id.clone(),
                        center,
                        split: Split::Train,
                        label: None,
                    });
                }
            }
        }
    }
    PatchManifest::new(version, base.seed, entries)
}

/// Checks a delta against the registry and returns its labeled pixel count.
pub(crate) fn validate_delta(meta: &ProjectMeta, slide_id: &str, x0: u32, y0: u32, delta: &GrayImage) -> Result<u64> {
    let slide = meta
        .slide(slide_id)
        .ok_or_else(|| Error::NotFound(format!("slide {slide_id} is not in the project")))?;
    if slide.role != SlideRole::Review {
        return Err(Error::Validation(format!(
            "slide {slide_id} is a {:?} slide; only review slides take corrections",
            slide.role
        )));
    }
    if x0 as u64 + delta.width as u64 > slide.width as u64 || y0 as u64 + delta.height as u64 > slide.height as u64 {
        return Err(Error::Validation(format!(
            "{}x{} delta at ({x0}, {y0}) falls outside the {}x{} slide",
            delta.width, delta.height, slide.width, slide.height
        )));
    }
    if let Some(bad) = delta.data.iter().find(|&&v| !is_valid_label(v)) {
        return Err(Error::Validation(format!("label value {bad} is not a class (0-5)")));
    }
    let labeled = delta.data.iter().filter(|&&v| v != UNLABELED).count() as u64;
    if labeled == 0 {
        return Err(Error::Validation("correction labels no pixels".into()));
    }
    Ok(labeled)
}

impl DialProject {
    /// Creates the project with iteration 0 open and `M_0 = pretrained`.
    pub fn bootstrap(root: &Path, input: BootstrapInput<'_>) -> Result<Self> {
        input.config.validate()?;
        if input.slides.is_empty() {
            return Err(Error::Validation("a project needs at least one slide".into()));
        }
        if root.join("project.json").exists() || root.join(LOG_FILE).exists() {
            return Err(Error::Conflict(format!("{} already holds a project", root.display())));
        }
        if input.pretrained.meta.model != input.config.training.model {
            return Err(Error::Contract("pretrained model and project configuration differ".into()));
        }
        let mut slides = input.slides;
        let mut seen = BTreeSet::new();
        let mut opened = BTreeMap::new();
        for s in &mut slides {
            if !seen.insert(s.slide_id.clone()) {
                return Err(Error::Validation(format!("slide {} listed twice", s.slide_id)));
            }
            let pyramid = open_slide(&resolve(root, &s.path))?;
            if pyramid.slide_id() != s.slide_id {
                return Err(Error::Validation(format!(
                    "{} holds slide {}, registered as {}",
                    s.path.display(),
                    pyramid.slide_id(),
                    s.slide_id
                )));
            }
            (s.width, s.height) = pyramid.dims();
            opened.insert(s.slide_id.clone(), pyramid);
        }
        let meta = ProjectMeta {
            schema_version: PROJECT_SCHEMA_VERSION,
            project_id: input.project_id.clone(),
            created_at: Utc::now(),
            slides,
            config: input.config,
        };
        let base = PatchManifest::new(0, input.base_manifest.seed, input.base_manifest.entries)?;
        for e in &base.entries {
            let s = meta
                .slide(&e.slide_id)
                .ok_or_else(|| Error::Validation(format!("manifest names unknown slide {}", e.slide_id)))?;
            let expected = match e.split {
                Split::Train => SlideRole::Bootstrap,
                Split::Val => SlideRole::Validation,
                Split::Test => SlideRole::Test,
            };
            if s.role != expected {
                return Err(Error::Validation(format!(
                    "{:?} entry on {:?} slide {}",
                    e.split, s.role, e.slide_id
                )));
            }
        }
        for (id, ann) in &input.base_annotations {
            let s = meta
                .slide(id)
                .ok_or_else(|| Error::Validation(format!("annotation for unknown slide {id}")))?;
            if (ann.width, ann.height) != (s.width, s.height) {
                return Err(Error::Validation(format!("annotation for {id} has the wrong size")));
            }
        }

        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        raster::write_json(&root.join("project.json"), &meta)?;
        for (id, ann) in &input.base_annotations {
            raster::write_atomic(&base_annotation_path(root, id), &ann.encode())?;
        }
        raster::write_atomic(&manifest_path(root, 0), &base.to_jsonl()?)?;
        let m0 = checkpoint_dir(root, 0);
        if !m0.join("meta.json").exists() {
            input.pretrained.save(&m0)?;
        }
        let record = LogRecord::new(
            0,
            GENESIS,
            Event::Bootstrap {
                project_id: input.project_id,
                model_hash: input.pretrained.hash().to_string(),
            },
        )?;
        ledger::append(&root.join(LOG_FILE), &record)?;
        let project = Self::open(root)?;
        project.slides.lock().extend(opened);
        Ok(project)
    }

    /// Opens a project, discarding a torn final log write and rebuilding the
    /// derived files from the log.
    pub fn open(root: &Path) -> Result<Self> {
        let meta = read_project_meta(root)?;
        let log_path = root.join(LOG_FILE);
        let contents = read_log(&log_path)?;
        if contents.torn_tail {
            ledger::truncate(&log_path, contents.valid_len)?;
        }
        if contents.records.is_empty() {
            return Err(Error::Format(format!("{}: bootstrap never completed", root.display())));
        }
        check_chain(&contents.records).map_err(Error::Invariant)?;
        let base_manifest = PatchManifest::load(&manifest_path(root, 0))?;
        let patch = meta.config.training.model.patch;
        let state = replay::replay(root, &meta, &contents.records, &mut |version, state| {
            let path = manifest_path(root, version);
            if !path.is_file() {
                let m = derive_manifest(&base_manifest, &state.annotations, patch, version)?;
                raster::write_atomic(&path, &m.to_jsonl()?)?;
            }
            Ok(())
        })?;
        let last = contents.records.last().expect("non-empty log");
        let project = Self {
            root: root.to_path_buf(),
            head: last.hash.clone(),
            seq: last.seq + 1,
            meta,
            base_manifest,
            state,
            slides: Mutex::new(BTreeMap::new()),
        };
        project.repair_derived_files()?;
        Ok(project)
    }

    /// Makes the derived files match the replayed state and removes leftovers
    /// of writes that never reached the log.
    fn repair_derived_files(&self) -> Result<()> {
        let ann_dir = self.root.join("annotations");
        for (id, ann) in &self.state.annotations {
            let path = annotation_path(&self.root, id);
            let bytes = ann.encode();
            if std::fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
                raster::write_atomic(&path, &bytes)?;
            }
        }
        let known: BTreeSet<String> = self.state.corrections.iter().map(|c| c.correction_id.clone()).collect();
        remove_unlisted(&ann_dir, |stem, ext| ext == "lbl" && self.state.annotations.contains_key(stem))?;
        remove_unlisted(&self.root.join("corrections"), |stem, ext| {
            (ext == "png" || ext == "json") && known.contains(stem)
        })?;
        remove_unlisted(&self.root.join("manifests"), |stem, ext| {
            ext == "jsonl"
                && stem
                    .strip_prefix('v')
                    .and_then(|v| v.parse::<u64>().ok())
                    .is_some_and(|v| v <= self.state.manifest_version)
        })?;
        let models: BTreeSet<String> = self.state.models.iter().map(|m| format!("M{}", m.iteration)).collect();
        remove_unlisted(&self.root.join("checkpoints"), |stem, ext| ext.is_empty() && models.contains(stem))?;
        Ok(())
    }

    fn append(&mut self, event: Event) -> Result<()> {
        let record = LogRecord::new(self.seq, &self.head, event)?;
        ledger::append(&self.root.join(LOG_FILE), &record)?;
        self.head = record.hash;
        self.seq += 1;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&self) -> &ProjectMeta {
        &self.meta
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    pub fn phase(&self) -> &Phase {
        &self.state.phase
    }

    pub fn open_iteration(&self) -> Option<u32> {
        self.state.open_iteration()
    }

    /// Hash of the newest log record.
    pub fn head_hash(&self) -> &str {
        &self.head
    }

    pub fn models(&self) -> &[InstalledModel] {
        &self.state.models
    }

    pub fn current_model(&self) -> &InstalledModel {
        self.state.models.last().expect("bootstrap installs M0")
    }

    pub fn load_model(&self, iteration: u32) -> Result<SegCheckpoint> {
        let m = self
            .state
            .models
            .get(iteration as usize)
            .ok_or_else(|| Error::NotFound(format!("model M{iteration}")))?;
        let ck = SegCheckpoint::load(&checkpoint_dir(&self.root, iteration))?;
        if ck.hash() != m.hash {
            return Err(Error::Invariant(format!("checkpoint M{iteration} does not match the ledger")));
        }
        Ok(ck)
    }

    pub fn corrections(&self) -> &[CorrectionRecord] {
        &self.state.corrections
    }

    /// Cumulative corrections on a slide.
    pub fn annotation(&self, slide_id: &str) -> Option<&LabelMap> {
        self.state.annotations.get(slide_id)
    }

    pub fn manifest_version(&self) -> u64 {
        self.state.manifest_version
    }

    pub fn base_manifest(&self) -> &PatchManifest {
        &self.base_manifest
    }

    pub fn manifest(&self, version: u64) -> Result<PatchManifest> {
        PatchManifest::load(&manifest_path(&self.root, version))
    }

    pub fn slide(&self, slide_id: &str) -> Result<SlidePyramid> {
        if let Some(s) = self.slides.lock().get(slide_id) {
            return Ok(s.clone());
        }
        let entry = self
            .meta
            .slide(slide_id)
            .ok_or_else(|| Error::NotFound(format!("slide {slide_id}")))?;
        let s = open_slide(&resolve(&self.root, &entry.path))?;
        self.slides.lock().insert(slide_id.to_string(), s.clone());
        Ok(s)
    }

    pub fn segmentation_dir(&self, slide_id: &str, model_tag: &str) -> PathBuf {
        self.root.join("segmentations").join(slide_id).join(model_tag)
    }

    /// Merges a correction into its slide's cumulative annotation.
    pub fn ingest_correction(&mut self, c: Correction) -> Result<Ingested> {
        let iteration = match self.state.phase {
            Phase::Open { iteration } => iteration,
            Phase::Training { ref job } => {
                return Err(Error::Conflict(format!(
                    "iteration {} is closed while {} trains",
                    job.iteration, job.target_tag
                )))
            }
            Phase::Complete { .. } => return Err(Error::Conflict("the project is complete".into())),
        };
        if let Some(i) = c.iteration {
            if i != iteration {
                return Err(Error::Conflict(format!("iteration {i} is not open (open: {iteration})")));
            }
        }
        if !(c.duration_minutes.is_finite() && c.duration_minutes >= 0.0) {
            return Err(Error::Validation(format!("duration {} is invalid", c.duration_minutes)));
        }
        let labeled = validate_delta(&self.meta, &c.slide_id, c.x0, c.y0, &c.delta)?;
        let id = format!("c{:06}", self.state.corrections.len());
        let png = raster::encode_gray_png(&c.delta)?;
        let record = CorrectionRecord {
            correction_id: id.clone(),
            slide_id: c.slide_id,
            iteration,
            author: c.author,
            duration_minutes: c.duration_minutes,
            session_id: c.session_id,
            x0: c.x0,
            y0: c.y0,
            width: c.delta.width,
            height: c.delta.height,
            labeled,
            delta_sha256: ledger::sha256_hex(&png),
            created_at: Utc::now(),
        };
        raster::write_atomic(&correction_png(&self.root, &id), &png)?;
        raster::write_json(&self.root.join("corrections").join(format!("{id}.json")), &record)?;
        crash_point("after_delta");
        self.append(Event::Correction(record.clone()))?;
        crash_point("after_log");

        let slide = self.meta.slide(&record.slide_id).expect("validated");
        let ann = self
            .state
            .annotations
            .entry(record.slide_id.clone())
            .or_insert_with(|| LabelMap::new(slide.width, slide.height));
        let changed = ann.merge(record.x0, record.y0, &c.delta)?;
        raster::write_atomic(&annotation_path(&self.root, &record.slide_id), &ann.encode())?;
        self.state.corrections.push(record);
        self.state.manifest_version += 1;
        let version = self.state.manifest_version;
        let m = derive_manifest(
            &self.base_manifest,
            &self.state.annotations,
            self.meta.config.training.model.patch,
            version,
        )?;
        raster::write_atomic(&manifest_path(&self.root, version), &m.to_jsonl()?)?;
        Ok(Ingested {
            correction_id: id,
            manifest_version: version,
            labeled,
            changed,
        })
    }

    /// Adds an annotation session to the time log.
    pub fn log_session(
        &mut self,
        session_id: &str,
        annotator: &str,
        slide_id: &str,
        started_at: DateTime<Utc>,
        ended_at: DateTime<Utc>,
    ) -> Result<SessionRecord> {
        if ended_at < started_at {
            return Err(Error::Validation("session ends before it starts".into()));
        }
        if self.meta.slide(slide_id).is_none() {
            return Err(Error::NotFound(format!("slide {slide_id}")));
        }
        let iteration = match &self.state.phase {
            Phase::Open { iteration } | Phase::Complete { iteration } => *iteration,
            Phase::Training { job } => job.iteration,
        };
        let record = SessionRecord {
            session_id: session_id.to_string(),
            annotator: annotator.to_string(),
            slide_id: slide_id.to_string(),
            iteration,
            started_at,
            ended_at,
            duration_minutes: (ended_at - started_at).num_milliseconds() as f64 / 60_000.0,
        };
        self.append(Event::Session(record.clone()))?;
        self.state.sessions.push(record.clone());
        Ok(record)
    }

    /// Closes the open iteration and returns the job that trains its successor.
    pub fn close_iteration(&mut self) -> Result<JobSpec> {
        let Some(iteration) = self.state.open_iteration() else {
            return Err(Error::Conflict("no iteration is open".into()));
        };
        if self.state.corrections_in(iteration) == 0 {
            return Err(Error::Conflict(format!(
                "iteration {iteration} has no corrections; mark the project complete instead"
            )));
        }
        let parent = self.current_model().clone();
        let (mode, lr) = if iteration == 0 {
            (JobMode::Train, self.meta.config.train_lr)
        } else {
            (JobMode::Finetune, self.meta.config.finetune_lr)
        };
        let job = JobSpec {
            project_id: self.meta.project_id.clone(),
            iteration,
            target_tag: format!("M{}", iteration + 1),
            mode,
            parent_tag: parent.tag,
            parent_hash: parent.hash,
            manifest_version: self.state.manifest_version,
            config: SegTrainConfig {
                lr: Some(lr),
                ..self.meta.config.training.clone()
            },
        };
        self.append(Event::IterationClosed {
            iteration,
            job: job.clone(),
        })?;
        self.state.phase = Phase::Training { job: Box::new(job.clone()) };
        Ok(job)
    }

    fn pending_job(&self, spec: &JobSpec) -> Result<()> {
        match &self.state.phase {
            Phase::Training { job } if **job == *spec => Ok(()),
            _ => Err(Error::Conflict(format!("job for {} is not pending", spec.target_tag))),
        }
    }

    /// Loads what the job needs so it can run without holding the project.
    pub fn prepare_job(&self, spec: &JobSpec) -> Result<PreparedJob> {
        self.pending_job(spec)?;
        let manifest = self.manifest(spec.manifest_version)?;
        let mut pool = TrainingPool::default();
        for id in manifest.entries.iter().map(|e| e.slide_id.as_str()).collect::<BTreeSet<_>>() {
            pool.slides.insert(id.to_string(), self.slide(id)?);
            let base = match std::fs::read(base_annotation_path(&self.root, id)) {
                Ok(bytes) => Some(LabelMap::decode(&bytes)?),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                Err(e) => return Err(Error::io(base_annotation_path(&self.root, id), e)),
            };
            let ann = match (base, self.state.annotations.get(id)) {
                (Some(mut b), Some(top)) => {
                    b.merge(0, 0, &top.to_dense())?;
                    b
                }
                (Some(b), None) => b,
                (None, Some(top)) => top.clone(),
                (None, None) => continue,
            };
            pool.annotations.insert(id.to_string(), ann);
        }
        let parent = match spec.mode {
            JobMode::Train => None,
            JobMode::Finetune => Some(self.load_model(spec.iteration)?),
        };
        Ok(PreparedJob {
            spec: spec.clone(),
            manifest,
            pool,
            parent,
        })
    }

    /// Installs a finished job's checkpoint as `M_{k+1}` and opens iteration `k+1`.
    pub fn install_model(&mut self, spec: &JobSpec, ck: &SegCheckpoint) -> Result<()> {
        self.pending_job(spec)?;
        let next = spec.iteration + 1;
        let m = &ck.meta;
        if m.tag != spec.target_tag || m.iteration != next {
            return Err(Error::Contract(format!("checkpoint {} is not {}", m.tag, spec.target_tag)));
        }
        if m.parent_hash.as_deref() != Some(spec.parent_hash.as_str()) {
            return Err(Error::Contract(format!("{} does not descend from {}", m.tag, spec.parent_tag)));
        }
        if m.manifest_version != Some(spec.manifest_version) || m.model != spec.config.model {
            return Err(Error::Contract(format!("{} was trained for a different job", m.tag)));
        }
        let dir = checkpoint_dir(&self.root, next);
        match SegCheckpoint::load(&dir) {
            Ok(existing) if existing.hash() == ck.hash() => {}
            Ok(_) => {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                ck.save(&dir)?;
            }
            Err(_) => ck.save(&dir)?,
        }
        self.append(Event::ModelInstalled {
            iteration: next,
            tag: spec.target_tag.clone(),
            hash: ck.hash().to_string(),
            parent_hash: spec.parent_hash.clone(),
        })?;
        self.state.models.push(InstalledModel {
            iteration: next,
            tag: spec.target_tag.clone(),
            hash: ck.hash().to_string(),
            parent_hash: Some(spec.parent_hash.clone()),
        });
        self.state.phase = Phase::Open { iteration: next };
        Ok(())
    }

    /// Records a failed job and reopens its iteration; the current model is kept.
    pub fn record_job_failure(&mut self, spec: &JobSpec, detail: &str) -> Result<()> {
        self.pending_job(spec)?;
        self.append(Event::JobFailed {
            iteration: spec.iteration,
            detail: detail.to_string(),
        })?;
        self.state.failures.push((spec.iteration, detail.to_string()));
        self.state.phase = Phase::Open {
            iteration: spec.iteration,
        };
        Ok(())
    }

    /// Declares the current model final.
    pub fn complete(&mut self) -> Result<()> {
        let Some(iteration) = self.state.open_iteration() else {
            return Err(Error::Conflict("no iteration is open".into()));
        };
        if self.state.corrections_in(iteration) > 0 {
            return Err(Error::Conflict(format!(
                "iteration {iteration} has corrections; close it first"
            )));
        }
        self.append(Event::Completed { iteration })?;
        self.state.phase = Phase::Complete { iteration };
        Ok(())
    }

    pub fn slide_status(&self) -> Vec<(String, SlideStatus)> {
        let complete = matches!(self.state.phase, Phase::Complete { .. });
        let mut latest: BTreeMap<&str, u32> = BTreeMap::new();
        for c in &self.state.corrections {
            latest.insert(&c.slide_id, c.iteration + 1);
        }
        self.meta
            .slides
            .iter()
            .map(|s| {
                let status = if complete {
                    SlideStatus::Complete
                } else {
                    match latest.get(s.slide_id.as_str()) {
                        Some(&k) => SlideStatus::Corrected(k),
                        None => SlideStatus::Unreviewed,
                    }
                };
                (s.slide_id.clone(), status)
            })
            .collect()
    }

    pub fn time_report(&self) -> TimeReport {
        annotation_time_report(&self.state.corrections, &self.state.sessions)
    }
}

/// Session and correction minutes per round, plus the distinct corrected slides.
pub fn annotation_time_report(corrections: &[CorrectionRecord], sessions: &[SessionRecord]) -> TimeReport {
    let mut rounds: BTreeMap<u32, RoundTime> = BTreeMap::new();
    let new_round = |it: u32| RoundTime {
        iteration: it + 1,
        ..Default::default()
    };
    for c in corrections {
        let r = rounds.entry(c.iteration + 1).or_insert_with(|| new_round(c.iteration));
        r.minutes += c.duration_minutes;
        r.corrections += 1;
        r.slides.insert(c.slide_id.clone());
    }
    for s in sessions {
        rounds.entry(s.iteration + 1).or_insert_with(|| new_round(s.iteration)).minutes += s.duration_minutes;
    }
    let distinct: BTreeSet<&str> = corrections.iter().map(|c| c.slide_id.as_str()).collect();
    TimeReport {
        total_minutes: rounds.values().map(|r| r.minutes).sum(),
        distinct_slides: distinct.len(),
        rounds: rounds.into_values().collect(),
    }
}

/// A job with its inputs loaded.
pub struct PreparedJob {
    pub spec: JobSpec,
    pub manifest: PatchManifest,
    pub pool: TrainingPool,
    pub parent: Option<SegCheckpoint>,
}

impl PreparedJob {
    pub fn run(&self, progress: &mut dyn FnMut(f64)) -> Result<SegCheckpoint> {
        let start = match &self.parent {
            Some(p) => Start::From(p),
            None => Start::Random,
        };
        let lineage = Lineage {
            iteration: self.spec.iteration + 1,
            parent_hash: Some(self.spec.parent_hash.clone()),
            manifest_version: Some(self.spec.manifest_version),
        };
        run_training(&self.spec.config, &self.manifest, &self.pool, start, lineage, progress)
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn remove_unlisted(dir: &Path, keep: impl Fn(&str, &str) -> bool) -> Result<()> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        let (stem, ext) = match name.rsplit_once('.') {
            Some((s, e)) if !path.is_dir() => (s.to_string(), e.to_string()),
            _ => (name.clone(), String::new()),
        };
        if keep(&stem, &ext) {
            continue;
        }
        ::log::warn!("removing {} (not referenced by the log)", path.display());
        let res = if path.is_dir() {
            std::fs::remove_dir_all(&path)
        } else {
            std::fs::remove_file(&path)
        };
        res.map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
