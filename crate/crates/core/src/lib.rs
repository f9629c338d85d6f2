//! Whole-slide cancer segmentation trained by deep interactive learning, and
//! slide-level mutation prediction over the segmented cancer regions.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`slide`]: pyramidal slide access, tissue masking, synthetic slides
//! * [`patch`]: multi-magnification patches, grids, splits, augmentation
//! * [`segnet`]: the multi-magnification segmentation network and its training
//! * [`dial`]: the interactive-learning ledger (corrections, iterations, lineage)
//! * [`metrics`]: pixel confusion metrics and ROC-AUC
//! * [`mutation`]: cancer-patch classification and slide aggregation

pub mod dial;
pub mod error;
pub mod metrics;
pub mod mutation;
pub mod nn;
pub mod patch;
pub mod raster;
pub mod segnet;
pub mod slide;

pub use error::{Error, Result};
