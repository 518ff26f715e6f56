//! Compositional temporal grounding of natural-language queries in video.

pub mod adapters;
pub mod clause_seg;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod event_repr;
pub mod grounding;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod video_repr;

pub use config::ExperimentConfig;
pub use dataset::{load_dataset, Dataset, DatasetRecord, Example, LoadOptions};
pub use error::{CtgError, Result};
pub use model::{CtgNet, ModelBundle, ModelConfig, SegmentationMode};
pub use video_repr::Segment;
