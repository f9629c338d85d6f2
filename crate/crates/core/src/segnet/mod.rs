//! Six-class tissue segmentation: label maps with an unlabeled sentinel,
//! class weighting, the multi-magnification network, training and
//! slide-scale inference.

mod checkpoint;
mod infer;
mod labels;
mod loss;
mod model;
mod train;

pub use checkpoint::{CheckpointMeta, EpochRecord, SegCheckpoint, CHECKPOINT_SCHEMA_VERSION};
pub use infer::{segment_slide, seg_forward, to_binary, ScoreMap, SegmentationMask};
pub use labels::{LabelMap, PartialAnnotation, LABEL_TILE};
pub use loss::weighted_cross_entropy;
pub use model::{images_to_tensor, Dmmn, DmmnConfig, PatchBatch};
pub use train::{
    binary_iou, build_samples, finetune_segmentation, run_training, select_epoch, train_on_samples,
    train_segmentation, Lineage, SegSample, SegTrainConfig, Start, TrainingPool, FINETUNE_LR, TRAIN_LR,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 6;
pub const CARCINOMA: u8 = 0;
pub const BENIGN_EPITHELIUM: u8 = 1;
pub const STROMA: u8 = 2;
pub const NECROSIS: u8 = 3;
pub const ADIPOSE: u8 = 4;
pub const BACKGROUND: u8 = 5;
/// Label value for pixels that carry no annotation.
pub const UNLABELED: u8 = 255;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "carcinoma",
    "benign epithelium",
    "stroma",
    "necrosis",
    "adipose tissue",
    "background",
];

/// Overlay colours per class. Background is drawn fully transparent.
pub const CLASS_PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [255, 0, 0],
    [0, 0, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 165, 0],
    [0, 0, 0],
];
pub const CLASS_ALPHA: [u8; NUM_CLASSES] = [255, 255, 255, 255, 255, 0];

pub fn is_valid_label(v: u8) -> bool {
    (v as usize) < NUM_CLASSES || v == UNLABELED
}

/// Per-class loss weights `w_c = 1 − N_c / N_t` over labeled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: [f64; NUM_CLASSES],
    pub counts: [u64; NUM_CLASSES],
    pub total: u64,
}

impl ClassWeights {
    pub fn from_counts(counts: [u64; NUM_CLASSES]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Degenerate("no labeled pixels".into()));
        }
        let w = counts.map(|n| 1.0 - n as f64 / total as f64);
        Ok(Self { w, counts, total })
    }
}

/// Class weights over the labeled pixels of every annotation in the pool.
pub fn compute_class_weights<'a>(annotations: impl IntoIterator<Item = &'a LabelMap>) -> Result<ClassWeights> {
    let mut counts = [0u64; NUM_CLASSES];
    for a in annotations {
        for (c, n) in a.class_counts().iter().enumerate() {
            counts[c] += n;
        }
    }
    ClassWeights::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_with(counts: &[(u8, u32)]) -> LabelMap {
        let total: u32 = counts.iter().map(|c| c.1).sum::<u32>() + 37;
        let mut m = LabelMap::new(total, 1);
        let mut x = 0;
        for &(c, n) in counts {
            for _ in 0..n {
                m.set(x, 0, c);
                x += 1;
            }
        }
        m
    }

    #[test]
    fn single_class_gets_zero_weight() {
        let w = compute_class_weights([&map_with(&[(STROMA, 40)])]).unwrap();
        assert_eq!(w.w, [1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(w.total, 40);
    }

    #[test]
    fn quarter_three_quarters() {
        let w = compute_class_weights([&map_with(&[(0, 250), (1, 750)])]).unwrap();
        assert_eq!(w.w[0], 0.75);
        assert_eq!(w.w[1], 0.25);
    }

    #[test]
    fn unlabeled_only_is_degenerate() {
        let m = LabelMap::new(8, 8);
        assert!(matches!(compute_class_weights([&m]), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn weights_match_histogram(labels in proptest::collection::vec(prop_oneof![0u8..6, Just(UNLABELED)], 1..400)) {
            let mut m = LabelMap::new(labels.len() as u32, 1);
            for (x, &v) in labels.iter().enumerate() {
                m.set(x as u32, 0, v);
            }
            let mut hist = [0u64; 256];
            for &v in &labels {
                hist[v as usize] += 1;
            }
            let nt: u64 = hist[..6].iter().sum();
            match compute_class_weights([&m]) {
                Ok(w) => {
                    prop_assert_eq!(w.total, nt);
                    for c in 0..6 {
                        prop_assert_eq!(w.counts[c], hist[c]);
                        prop_assert_eq!(w.w[c], 1.0 - hist[c] as f64 / nt as f64);
                        prop_assert!((0.0..=1.0).contains(&w.w[c]));
                    }
                }
                Err(_) => prop_assert_eq!(nt, 0),
            }
        }
    }
}
