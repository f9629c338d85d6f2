//! Labeled synthetic cohorts: one slide per case, BRCA cases rendered with
//! the mutation texture, cases split by label.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MutationStatus;
use crate::error::{Error, Result};
use crate::patch::{split_cases, CaseRecord, Split, SplitRatios};
use crate::raster;
use crate::slide::{generate_synthetic_slide, SyntheticSpec};

pub const COHORT_FILE: &str = "cohort.json";
pub const COHORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub slides: usize,
    /// Share of BRCA cases, rounded to the nearest whole case.
    #[serde(default = "default_brca_fraction")]
    pub brca_fraction: f64,
    /// Slide template; its mutation flag is set per case.
    #[serde(default)]
    pub slide: SyntheticSpec,
    #[serde(default)]
    pub split: SplitRatios,
    /// Slide ids are this prefix plus a four-digit index.
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_brca_fraction() -> f64 {
    0.2
}
fn default_prefix() -> String {
    "case".into()
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slides == 0 {
            return Err(Error::Validation("a cohort needs at least one slide".into()));
        }
        if !(0.0..=1.0).contains(&self.brca_fraction) {
            return Err(Error::Validation(format!("BRCA fraction {} outside [0, 1]", self.brca_fraction)));
        }
        if self.id_prefix.is_empty() || !self.id_prefix.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::Validation(format!("slide id prefix {:?} must be non-empty [A-Za-z0-9_-]", self.id_prefix)));
        }
        self.slide.validate()
    }

    pub fn brca_count(&self) -> usize {
        (self.slides as f64 * self.brca_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCase {
    pub slide_id: String,
    /// Slide directory relative to the cohort root.
    pub path: PathBuf,
    pub label: MutationStatus,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema_version: u32,
    pub seed: u64,
    pub spec: CohortSpec,
    pub cases: Vec<CohortCase>,
}

impl Cohort {
    pub fn load(root: &Path) -> Result<Self> {
        let c: Cohort = raster::read_json(&root.join(COHORT_FILE))?;
        if c.schema_version != COHORT_SCHEMA_VERSION {
            return Err(Error::Format(format!("cohort schema {} unsupported", c.schema_version)));
        }
        Ok(c)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &CohortCase> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

/// Renders a cohort under `root`, which must not hold one already. The
/// cohort file is written last, so an interrupted run leaves no cohort.
pub fn generate_cohort(spec: &CohortSpec, seed: u64, root: &Path) -> Result<Cohort> {
    spec.validate()?;
    if root.join(COHORT_FILE).exists() {
        return Err(Error::Conflict(format!("{} already holds a cohort", root.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<MutationStatus> = (0..spec.slides)
        .map(|i| if i < spec.brca_count() { MutationStatus::Brca } else { MutationStatus::NonBrca })
        .collect();
    labels.shuffle(&mut rng);
    let ids: Vec<String> = (0..spec.slides).map(|i| format!("{}{i:04}", spec.id_prefix)).collect();
    let records: Vec<CaseRecord> = ids
        .iter()
        .zip(&labels)
        .map(|(id, l)| CaseRecord {
            case_id: id.clone(),
            stratum: format!("{l:?}"),
        })
        .collect();
    let splits = if spec.slides >= 3 {
        split_cases(&records, spec.split, seed)?
    } else {
        ids.iter().map(|id| (id.clone(), Split::Train)).collect()
    };
    let mut cases = Vec::new();
    for (i, (id, label)) in ids.iter().zip(labels).enumerate() {
        let slide_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let path = PathBuf::from("slides").join(id);
        let slide_spec = SyntheticSpec {
            mutation_texture: label.is_brca(),
            ..spec.slide.clone()
        };
        generate_synthetic_slide(&slide_spec, slide_seed, id, &root.join(&path))?;
        log::info!("generated {id} ({label:?})");
        cases.push(CohortCase {
            slide_id: id.clone(),
            path,
            label,
            split: splits[id],
            seed: slide_seed,
        });
    }
    let cohort = Cohort {
        schema_version: COHORT_SCHEMA_VERSION,
        seed,
        spec: spec.clone(),
        cases,
    };
    raster::write_json(&root.join(COHORT_FILE), &cohort)?;
    Ok(cohort)
}
