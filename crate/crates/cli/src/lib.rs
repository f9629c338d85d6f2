//! Batch commands behind the `dial` binary. Each command reads a declarative
//! config, writes into a fresh output directory together with the resolved
//! config, and returns a JSON report.

pub mod brca;
pub mod seg;
pub mod sim;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dial_core::mutation::cohort::Cohort;
use dial_core::mutation::MutationStatus;
use dial_core::patch::Split;
use dial_core::raster::{self, GrayImage};
use dial_core::slide::{open_slide, SlidePyramid, SyntheticSlide};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// A problem with the invocation itself; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for invalid input (bad config, bad data, existing output), 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<dial_core::Error>() {
            return if e.is_validation() { 2 } else { 3 };
        }
    }
    3
}

/// Reads a TOML (or, by extension, JSON) config; no path means all
/// defaults. Unknown keys are rejected by the config types.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return toml::from_str("").context("the command needs a --config file");
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn check_schema(v: u32) -> anyhow::Result<()> {
    if v != CONFIG_SCHEMA_VERSION {
        return Err(usage(format!("config schema_version {v} is not supported")));
    }
    Ok(())
}

pub fn default_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

/// Creates `out`, refusing any existing non-empty directory, and records
/// the resolved config in it.
pub fn prepare_out<T: Serialize>(out: &Path, command: &str, config: &T) -> anyhow::Result<()> {
    if out.exists() {
        let empty = out.is_dir() && std::fs::read_dir(out)?.next().is_none();
        if !empty {
            return Err(usage(format!("{} already exists; refusing to overwrite", out.display())));
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let snapshot = serde_json::json!({
        "schema_version": CONFIG_SCHEMA_VERSION,
        "command": command,
        "config": config,
    });
    raster::write_json(&out.join(RESOLVED_CONFIG), &snapshot)?;
    Ok(())
}

pub fn require_out(out: Option<&Path>) -> anyhow::Result<&Path> {
    out.ok_or_else(|| usage("the command needs --out"))
}

/// Output of a command: a JSON document plus its human rendering.
#[derive(Debug, Clone)]
pub struct Report {
    pub json: Value,
    pub text: String,
}

impl Report {
    pub fn new(json: Value, text: impl Into<String>) -> Self {
        Self { json, text: text.into() }
    }
}

/// One slide of an input set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideInput {
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Class-index PNG at base resolution; synthetic ground truth when unset.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

fn default_split() -> Split {
    Split::Train
}

/// Slides named individually and/or taken from a generated cohort.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideSource {
    #[serde(default)]
    pub cohort: Option<PathBuf>,
    /// Cohort splits to include; all when unset.
    #[serde(default)]
    pub splits: Option<Vec<Split>>,
    #[serde(default)]
    pub slides: Vec<SlideInput>,
}

#[derive(Debug, Clone)]
pub struct ResolvedSlide {
    pub slide_id: String,
    pub path: PathBuf,
    pub split: Split,
    pub label: Option<MutationStatus>,
    pub labels: Option<PathBuf>,
}

impl ResolvedSlide {
    pub fn open(&self) -> anyhow::Result<SlidePyramid> {
        open_slide(&self.path).with_context(|| format!("opening slide {}", self.path.display()))
    }

    /// Class-index map at base resolution.
    pub fn ground_truth(&self) -> anyhow::Result<GrayImage> {
        let img = match &self.labels {
            Some(p) => raster::read_gray_png(p)?,
            None => SyntheticSlide::load_ground_truth(&self.path)
                .with_context(|| format!("{} has no ground truth; set `labels`", self.slide_id))?,
        };
        Ok(img)
    }
}

impl SlideSource {
    pub fn is_empty(&self) -> bool {
        self.cohort.is_none() && self.slides.is_empty()
    }

    pub fn resolve(&self) -> anyhow::Result<Vec<ResolvedSlide>> {
        let mut out = Vec::new();
        if let Some(root) = &self.cohort {
            let cohort = Cohort::load(root)?;
            for c in &cohort.cases {
                if self.splits.as_ref().is_some_and(|s| !s.contains(&c.split)) {
                    continue;
                }
                out.push(ResolvedSlide {
                    slide_id: c.slide_id.clone(),
                    path: root.join(&c.path),
                    split: c.split,
                    label: Some(c.label),
                    labels: None,
                });
            }
        }
        for s in &self.slides {
            if self.splits.as_ref().is_some_and(|sp| !sp.contains(&s.split)) {
                continue;
            }
            let meta = open_slide(&s.path).with_context(|| format!("opening slide {}", s.path.display()))?;
            out.push(ResolvedSlide {
                slide_id: meta.slide_id().to_string(),
                path: s.path.clone(),
                split: s.split,
                label: None,
                labels: s.labels.clone(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &out {
            if !seen.insert(&s.slide_id) {
                return Err(usage(format!("slide {} is listed twice", s.slide_id)));
            }
        }
        Ok(out)
    }
}

pub fn synth_cohort(config: &SynthCohortConfig, out: &Path) -> anyhow::Result<Report> {
    check_schema(config.schema_version)?;
    config.cohort.validate()?;
    prepare_out(out, "synth-cohort", config)?;
    let cohort = dial_core::mutation::cohort::generate_cohort(&config.cohort, config.seed, out)?;
    let count = |split: Split| cohort.in_split(split).count();
    let brca = cohort.cases.iter().filter(|c| c.label.is_brca()).count();
    let json = serde_json::json!({
        "schema_version": CONFIG_SCHEMA_VERSION,
        "slides": cohort.cases.len(),
        "brca": brca,
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
    });
    let text = format!(
        "{} slides ({} BRCA) in {}: {} train, {} val, {} test",
        cohort.cases.len(),
        brca,
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(Report::new(json, text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCohortConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub cohort: dial_core::mutation::cohort::CohortSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub project: PathBuf,
}

/// Replays a project's log without touching it. A mismatch is an error
/// (exit 3) after the report has been written.
pub fn dial_replay(config: &ReplayConfig, out: Option<&Path>) -> anyhow::Result<Report> {
    check_schema(config.schema_version)?;
    let report = dial_core::dial::verify_project(&config.project)?;
    if let Some(out) = out {
        prepare_out(out, "dial-replay", config)?;
        raster::write_json(&out.join("replay.json"), &report)?;
    }
    let mut text = format!(
        "{} records, {} corrections, {} sessions, manifest v{}\n",
        report.records, report.corrections, report.sessions, report.manifest_version
    );
    for l in &report.lineage {
        text.push_str(&format!(
            "{} {} <- {}\n",
            l.tag,
            &l.hash[..12.min(l.hash.len())],
            l.parent_hash.as_deref().map_or("-", |h| &h[..12.min(h.len())])
        ));
    }
    if !report.ok() {
        for p in &report.problems {
            text.push_str(&format!("problem: {p}\n"));
        }
        anyhow::bail!("replay disagrees with the project directory:\n{text}");
    }
    text.push_str("replay matches the project directory");
    let mut json = serde_json::to_value(&report)?;
    json["schema_version"] = CONFIG_SCHEMA_VERSION.into();
    Ok(Report::new(json, text))
}
