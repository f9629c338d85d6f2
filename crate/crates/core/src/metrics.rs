//! Pixel confusion metrics and ROC-AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// A ratio that may be undefined (zero denominator). Undefined values are
/// carried explicitly rather than collapsed to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Measure {
    Defined(f64),
    Undefined,
}

impl Measure {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Measure::Undefined
        } else {
            Measure::Defined(num as f64 / den as f64)
        }
    }

    /// The value, or NaN when undefined.
    pub fn value(self) -> f64 {
        match self {
            Measure::Defined(v) => v,
            Measure::Undefined => f64::NAN,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Measure::Defined(_))
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Measure::Defined(v) => write!(f, "{v:.2}"),
            Measure::Undefined => f.write_str("n/a"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn iou(&self) -> Measure {
        Measure::ratio(self.tp, self.tp + self.fn_ + self.fp)
    }

    pub fn recall(&self) -> Measure {
        Measure::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> Measure {
        Measure::ratio(self.tp, self.tp + self.fp)
    }

    /// Accumulates one prediction/truth pair.
    #[inline]
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (false, true) => self.fn_ += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Swaps the roles of prediction and truth.
    pub fn transposed(&self) -> Self {
        Self {
            tp: self.tp,
            fn_: self.fp,
            fp: self.fn_,
            tn: self.tn,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fn_: self.fn_ + o.fn_,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Counts over two binary masks (nonzero = positive).
pub fn confusion(pred: &GrayImage, gt: &GrayImage) -> Result<ConfusionCounts> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Contract(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    // Branch-free tally: index = 2·pred + truth.
    let mut tally = [0u64; 4];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        tally[((p != 0) as usize) << 1 | (g != 0) as usize] += 1;
    }
    Ok(ConfusionCounts {
        tn: tally[0],
        fn_: tally[1],
        fp: tally[2],
        tp: tally[3],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub iou: Measure,
    pub recall: Measure,
    pub precision: Measure,
}

impl From<&ConfusionCounts> for SegScores {
    fn from(c: &ConfusionCounts) -> Self {
        Self {
            iou: c.iou(),
            recall: c.recall(),
            precision: c.precision(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlideSegResult {
    pub slide_id: String,
    pub counts: ConfusionCounts,
    pub scores: SegScores,
}

/// Segmentation report for one model: per-slide counts plus the pooled
/// (micro-averaged) counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegReport {
    pub model: String,
    pub slides: Vec<SlideSegResult>,
    pub pooled: ConfusionCounts,
    pub scores: SegScores,
}

impl SegReport {
    pub fn new(model: &str, per_slide: Vec<(String, ConfusionCounts)>) -> Self {
        let pooled: ConfusionCounts = per_slide.iter().map(|(_, c)| *c).sum();
        Self {
            model: model.to_string(),
            slides: per_slide
                .into_iter()
                .map(|(slide_id, counts)| SlideSegResult {
                    slide_id,
                    scores: SegScores::from(&counts),
                    counts,
                })
                .collect(),
            scores: SegScores::from(&pooled),
            pooled,
        }
    }
}

/// Renders reports as a model-by-metric table.
pub fn seg_table(reports: &[SegReport]) -> String {
    let mut s = format!("{:<10}{:>8}{:>8}{:>11}\n", "Model", "IOU", "Recall", "Precision");
    for r in reports {
        s.push_str(&format!(
            "{:<10}{:>8}{:>8}{:>11}\n",
            r.model,
            r.scores.iou.to_string(),
            r.scores.recall.to_string(),
            r.scores.precision.to_string()
        ));
    }
    s
}

/// Area under the ROC curve as the Mann–Whitney statistic,
/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, via midranks. Undefined unless both labels
/// occur.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Measure> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(Measure::Undefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i + 1 + j) / 2.
        let twice_mid = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(Measure::Defined(
        twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64),
    ))
}
