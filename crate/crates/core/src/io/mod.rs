//! Shared domain types and the portable file formats: binary PPM frames,
//! binary PGM label masks, CAMT float tensors and flat `key = value` configs.

mod config;
mod pnm;
mod sequence;
mod tensor;
mod types;

pub use config::{parse_config, parse_config_str, PipelineConfig, StmScheme};
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use sequence::{list_files, load_sequence, Sequence};
pub use tensor::{read_tensor, write_tensor, Tensor};
pub use types::{
    FeatureMap, FeaturePyramid, Grid, ImageFrame, LabelMask, ObjectSet, ProbMap, Rect, MIN_SIDE, STRIDES,
};
