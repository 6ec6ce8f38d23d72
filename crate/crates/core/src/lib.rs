//! Top-down keypoint estimation for crowded scenes: a small multi-resolution
//! network conditioned on an instance cue and refined over recurrent hops,
//! trained on synthetic stick-figure scenes with a from-scratch autodiff
//! kernel, and evaluated with OKS-based AP.

pub mod error;
pub mod experiment;
pub mod formats;
pub mod geometry;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pose;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use experiment::{ablate, AblationReport, ExperimentConfig, Variant};
pub use geometry::{filter_boxes, BBox};
pub use heatmap::{Heatmap, InstanceCue};
pub use metrics::{evaluate, oks, EvalConfig, EvalReport};
pub use model::{Model, ModelConfig};
pub use pipeline::{estimate, oks_nms, PipelineConfig, ScoredPose};
pub use pose::{Keypoint, Point, Pose, Visibility};
pub use synth::{Dataset, SceneConfig};
pub use train::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainLog};
