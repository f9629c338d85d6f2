use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GridConfig, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::raster;
use crate::slide::{SlidePyramid, TissueMask};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    /// Patch centre in base pixels.
    pub center: (i64, i64),
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    kind: String,
    version: u64,
    seed: u64,
    count: usize,
}

/// Versioned list of patch locations. Slides never span splits and
/// (slide, centre) pairs are unique.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatchManifest {
    pub version: u64,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl PatchManifest {
    pub fn new(version: u64, seed: u64, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { version, seed, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut split_of: HashMap<&str, Split> = HashMap::new();
        let mut seen = HashSet::new();
        for e in &self.entries {
            if let Some(&s) = split_of.get(e.slide_id.as_str()) {
                if s != e.split {
                    return Err(Error::Invariant(format!(
                        "slide {} appears in both {s:?} and {:?}",
                        e.slide_id, e.split
                    )));
                }
            }
            split_of.insert(&e.slide_id, e.split);
            if !seen.insert((&e.slide_id, e.center)) {
                return Err(Error::Invariant(format!(
                    "duplicate entry {} at {:?}",
                    e.slide_id, e.center
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Reassigns every entry to its slide's split.
    pub fn assign_splits(&mut self, splits: &BTreeMap<String, Split>) -> Result<()> {
        for e in &mut self.entries {
            e.split = *splits
                .get(&e.slide_id)
                .ok_or_else(|| Error::Validation(format!("slide {} has no split", e.slide_id)))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let header = Header {
            schema_version: MANIFEST_SCHEMA_VERSION,
            kind: "patch_manifest".into(),
            version: self.version,
            seed: self.seed,
            count: self.entries.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))?
            .map_err(|e| Error::Format(e.to_string()))?;
        let header: Header = serde_json::from_str(&first)?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION || header.kind != "patch_manifest" {
            return Err(Error::Format(format!(
                "unsupported manifest header {} v{}",
                header.kind, header.schema_version
            )));
        }
        let mut entries = Vec::with_capacity(header.count);
        for line in lines {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        if entries.len() != header.count {
            return Err(Error::Format(format!(
                "manifest declares {} entries, holds {}",
                header.count,
                entries.len()
            )));
        }
        Self::new(header.version, header.seed, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        raster::write_atomic(path, &self.to_jsonl()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&bytes)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_jsonl()?).map_err(|e| Error::io("<stream>", e))
    }
}

/// One entry per grid cell of `PATCH_SIZE` base pixels whose tissue fraction
/// exceeds `config.min_tissue_fraction`, in row-major order. Cells start at
/// the slide origin and step by `config.stride`.
pub fn enumerate_grid(slide: &SlidePyramid, mask: &TissueMask, config: &GridConfig) -> Result<PatchManifest> {
    if config.stride == 0 {
        return Err(Error::Validation("grid stride must be at least 1".into()));
    }
    let (w, h) = slide.dims();
    let base = slide.base_magnification();
    let half = PATCH_SIZE as i64 / 2;
    let mut entries = Vec::new();
    if !mask.is_empty() {
        for y in (0..h as i64).step_by(config.stride as usize) {
            for x in (0..w as i64).step_by(config.stride as usize) {
                if mask.tissue_fraction_in(base, x, y, PATCH_SIZE, PATCH_SIZE) > config.min_tissue_fraction {
                    entries.push(ManifestEntry {
                        slide_id: slide.slide_id().to_string(),
                        center: (x + half, y + half),
                        split: Split::Train,
                        label: None,
                    });
                }
            }
        }
    }
    PatchManifest::new(0, 0, entries)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// Stratification key, e.g. mutation status.
    pub stratum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Stratified case split. Within each stratum of `n` cases the validation
/// and test shares are `⌊n·ratio⌋` and training takes the remainder; cases
/// are shuffled by a seeded generator, strata visited in sorted order.
pub fn split_cases(cases: &[CaseRecord], ratios: SplitRatios, seed: u64) -> Result<BTreeMap<String, Split>> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split ratios {r:?} must be in [0,1] and sum to 1")));
    }
    if cases.len() < 3 {
        return Err(Error::Validation(format!("need at least 3 cases to split, got {}", cases.len())));
    }
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for c in cases {
        strata.entry(&c.stratum).or_default().push(&c.case_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for ids in strata.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        let n_val = (n * ratios.val + 1e-9).floor() as usize;
        let n_test = (n * ratios.test + 1e-9).floor() as usize;
        for (i, id) in ids.iter().enumerate() {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            if out.insert(id.to_string(), split).is_some() {
                return Err(Error::Validation(format!("case {id} listed twice")));
            }
        }
    }
    Ok(out)
}
