//! Collaborative attention memory pipeline for semi-supervised video object
//! segmentation.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`io`]: domain types, PPM/PGM frames and masks, CAMT tensors, config text
//! - [`embedder`]: deterministic feature pyramid extractor and mask downsampling
//! - [`stm`]: foreground/background space-time memory (write and dense read)
//! - [`matching`]: global/local foreground-background distance maps, instance gate
//! - [`neck`]: FPN/PAN fusion, object context attention, evidence decoder
//! - [`ensemble`]: logit-space fusion of probability maps and its trainer
//! - [`postproc`]: temporal component filtering and small-object crop refinement
//! - [`engine`]: per-frame orchestration, test-time augmentation, ablation harness
//! - [`eval`]: J/F metrics, synthetic sequences, reference baseline, reports

pub mod embedder;
pub mod engine;
pub mod ensemble;
mod error;
pub mod eval;
pub mod io;
pub mod matching;
pub mod neck;
pub mod ops;
pub mod postproc;
pub mod stm;

pub use error::{Error, Result};
pub use io::{
    FeatureMap, FeaturePyramid, ImageFrame, LabelMask, ObjectSet, PipelineConfig, ProbMap,
    Tensor,
};
