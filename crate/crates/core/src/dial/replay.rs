//! Rebuilding project state from the log, and checking a project directory
//! against that reconstruction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::ledger::{self, Event, LogRecord};
use super::*;
use crate::raster::read_gray_png;

fn bad(seq: u64, msg: impl std::fmt::Display) -> Error {
    Error::Invariant(format!("log record {seq}: {msg}"))
}

/// Applies the log from the bootstrap record on. `on_version` runs after
/// every correction with the new manifest version.
pub(crate) fn replay(
    root: &Path,
    meta: &ProjectMeta,
    records: &[LogRecord],
    on_version: &mut dyn FnMut(u64, &LedgerState) -> Result<()>,
) -> Result<LedgerState> {
    let Some((first, rest)) = records.split_first() else {
        return Err(Error::Invariant("empty log".into()));
    };
    let Event::Bootstrap { project_id, model_hash } = &first.event else {
        return Err(bad(0, "the log must start with the bootstrap"));
    };
    if *project_id != meta.project_id {
        return Err(bad(0, format!("belongs to project {project_id}")));
    }
    let mut state = LedgerState {
        project_id: project_id.clone(),
        phase: Phase::Open { iteration: 0 },
        models: vec![InstalledModel {
            iteration: 0,
            tag: "M0".into(),
            hash: model_hash.clone(),
            parent_hash: None,
        }],
        corrections: Vec::new(),
        sessions: Vec::new(),
        failures: Vec::new(),
        annotations: BTreeMap::new(),
        manifest_version: 0,
    };
    for r in rest {
        apply(root, meta, &mut state, r)?;
        if matches!(r.event, Event::Correction(_)) {
            on_version(state.manifest_version, &state)?;
        }
    }
    Ok(state)
}

fn apply(root: &Path, meta: &ProjectMeta, state: &mut LedgerState, r: &LogRecord) -> Result<()> {
    let seq = r.seq;
    match &r.event {
        Event::Bootstrap { .. } => return Err(bad(seq, "second bootstrap")),
        Event::Correction(c) => {
            if state.open_iteration() != Some(c.iteration) {
                return Err(bad(seq, format!("correction for iteration {} which is not open", c.iteration)));
            }
            let expected_id = format!("c{:06}", state.corrections.len());
            if c.correction_id != expected_id {
                return Err(bad(seq, format!("correction id {} out of order", c.correction_id)));
            }
            let png = correction_png(root, &c.correction_id);
            let bytes = std::fs::read(&png).map_err(|e| Error::io(&png, e))?;
            if ledger::sha256_hex(&bytes) != c.delta_sha256 {
                return Err(bad(seq, format!("delta {} does not match its recorded hash", c.correction_id)));
            }
            let delta = read_gray_png(&png)?;
            if (delta.width, delta.height) != (c.width, c.height) {
                return Err(bad(seq, "delta size differs from the record"));
            }
            let labeled = validate_delta(meta, &c.slide_id, c.x0, c.y0, &delta)?;
            if labeled != c.labeled {
                return Err(bad(seq, "labeled pixel count differs from the record"));
            }
            let slide = meta.slide(&c.slide_id).expect("validated");
            state
                .annotations
                .entry(c.slide_id.clone())
                .or_insert_with(|| LabelMap::new(slide.width, slide.height))
                .merge(c.x0, c.y0, &delta)?;
            state.corrections.push(c.clone());
            state.manifest_version += 1;
        }
        Event::Session(s) => state.sessions.push(s.clone()),
        Event::IterationClosed { iteration, job } => {
            if state.open_iteration() != Some(*iteration) || state.corrections_in(*iteration) == 0 {
                return Err(bad(seq, format!("iteration {iteration} cannot be closed here")));
            }
            let current = state.models.last().expect("M0");
            if job.iteration != *iteration
                || job.manifest_version != state.manifest_version
                || job.parent_hash != current.hash
            {
                return Err(bad(seq, "job spec does not match the ledger"));
            }
            state.phase = Phase::Training { job: Box::new(job.clone()) };
        }
        Event::JobFailed { iteration, detail } => match &state.phase {
            Phase::Training { job } if job.iteration == *iteration => {
                state.failures.push((*iteration, detail.clone()));
                state.phase = Phase::Open { iteration: *iteration };
            }
            _ => return Err(bad(seq, "failure without a pending job")),
        },
        Event::ModelInstalled {
            iteration,
            tag,
            hash,
            parent_hash,
        } => match &state.phase {
            Phase::Training { job }
                if job.iteration + 1 == *iteration && job.target_tag == *tag && job.parent_hash == *parent_hash =>
            {
                state.models.push(InstalledModel {
                    iteration: *iteration,
                    tag: tag.clone(),
                    hash: hash.clone(),
                    parent_hash: Some(parent_hash.clone()),
                });
                state.phase = Phase::Open { iteration: *iteration };
            }
            _ => return Err(bad(seq, format!("{tag} installed without its job"))),
        },
        Event::Completed { iteration } => {
            if state.open_iteration() != Some(*iteration) {
                return Err(bad(seq, "completion while no iteration is open"));
            }
            state.phase = Phase::Complete { iteration: *iteration };
        }
    }
    Ok(())
}

/// Digest over every slide's canonical annotation encoding.
pub fn annotations_digest(annotations: &BTreeMap<String, LabelMap>) -> String {
    let mut h = Sha256::new();
    for (id, ann) in annotations {
        let bytes = ann.encode();
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineageLink {
    pub tag: String,
    pub hash: String,
    pub parent_hash: Option<String>,
    /// Parameters the model's training started from, per its checkpoint.
    pub init_hash: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub records: usize,
    pub corrections: usize,
    pub sessions: usize,
    pub manifest_version: u64,
    pub head_hash: Option<String>,
    /// Labeled pixel count per slide after replay.
    pub annotations: BTreeMap<String, u64>,
    pub annotation_digest: Option<String>,
    pub lineage: Vec<LineageLink>,
    pub problems: Vec<String>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Replays the log of the project at `root` without modifying anything and
/// reports every place where the directory disagrees with the replay. A
/// directory without a project yields an empty report.
pub fn verify_project(root: &Path) -> Result<ReplayReport> {
    let mut report = ReplayReport::default();
    let log_path = root.join(LOG_FILE);
    if !root.join("project.json").exists() && !log_path.exists() {
        return Ok(report);
    }
    let meta = read_project_meta(root)?;
    let contents = read_log(&log_path)?;
    report.records = contents.records.len();
    report.head_hash = contents.records.last().map(|r| r.hash.clone());
    if contents.torn_tail {
        report.problems.push("the log ends in a torn record".into());
    }
    if let Err(e) = check_chain(&contents.records) {
        report.problems.push(format!("hash chain broken: {e}"));
        return Ok(report);
    }
    if contents.records.is_empty() {
        report.problems.push("the log has no bootstrap record".into());
        return Ok(report);
    }
    let base = match PatchManifest::load(&manifest_path(root, 0)) {
        Ok(b) => b,
        Err(e) => {
            report.problems.push(format!("base manifest: {e}"));
            return Ok(report);
        }
    };
    let patch = meta.config.training.model.patch;
    let mut manifest_problems = Vec::new();
    let replayed = replay(root, &meta, &contents.records, &mut |version, state| {
        let expected = derive_manifest(&base, &state.annotations, patch, version)?.to_jsonl()?;
        match std::fs::read(manifest_path(root, version)) {
            Ok(actual) if actual == expected => {}
            Ok(_) => manifest_problems.push(format!("manifest v{version} differs from replay")),
            Err(_) => manifest_problems.push(format!("manifest v{version} is missing")),
        }
        Ok(())
    });
    report.problems.extend(manifest_problems);
    let state = match replayed {
        Ok(s) => s,
        Err(e) => {
            report.problems.push(format!("replay failed: {e}"));
            return Ok(report);
        }
    };
    report.corrections = state.corrections.len();
    report.sessions = state.sessions.len();
    report.manifest_version = state.manifest_version;
    report.annotation_digest = Some(annotations_digest(&state.annotations));

    for (id, ann) in &state.annotations {
        report.annotations.insert(id.clone(), ann.labeled_count());
        match std::fs::read(annotation_path(root, id)) {
            Ok(bytes) if bytes == ann.encode() => {}
            Ok(_) => report.problems.push(format!("annotation of {id} differs from replay")),
            Err(_) => report.problems.push(format!("annotation of {id} is missing")),
        }
    }
    if let Ok(dir) = std::fs::read_dir(root.join("annotations")) {
        for entry in dir.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".lbl") {
                if !state.annotations.contains_key(id) {
                    report.problems.push(format!("annotation file for {id} has no corrections in the log"));
                }
            }
        }
    }

    let mut prev: Option<&InstalledModel> = None;
    for m in &state.models {
        let mut link = LineageLink {
            tag: m.tag.clone(),
            hash: m.hash.clone(),
            parent_hash: m.parent_hash.clone(),
            init_hash: None,
        };
        if m.parent_hash.as_ref() != prev.map(|p| &p.hash) {
            report.problems.push(format!("{} does not descend from its predecessor", m.tag));
        }
        match SegCheckpoint::load(&checkpoint_dir(root, m.iteration)) {
            Ok(ck) => {
                link.init_hash = Some(ck.meta.init_hash.clone());
                if ck.hash() != m.hash {
                    report.problems.push(format!("checkpoint {} differs from the ledger", m.tag));
                }
                if m.iteration > 0 && ck.meta.parent_hash != m.parent_hash {
                    report.problems.push(format!("checkpoint {} names another parent", m.tag));
                }
                // Finetuned models start from their parent's parameters.
                if m.iteration > 1 && Some(&ck.meta.init_hash) != m.parent_hash.as_ref() {
                    report.problems.push(format!("{} was not initialised from its parent", m.tag));
                }
            }
            Err(e) => report.problems.push(format!("checkpoint {}: {e}", m.tag)),
        }
        report.lineage.push(link);
        prev = Some(m);
    }
    Ok(report)
}
