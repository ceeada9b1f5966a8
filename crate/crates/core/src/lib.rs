//! Proposal-based visual grounding with a cosine-softmax objective.
//!
//! Region-proposal embeddings are scored against a learned affine transform
//! of a sentence embedding by cosine similarity, and the transform is trained
//! with softmax cross-entropy over each image's proposals. The crate covers
//! the dataset format, box geometry, the model with closed-form gradients,
//! SGD with Nesterov momentum, and the train/evaluate/ablate harness.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod synth;

pub use dataset::{
    load_dataset, write_dataset, Dataset, DatasetMeta, FeatureStore, GroundingSample, Proposal,
};
pub use error::{Error, ErrorKind, Result};
pub use geometry::{assign_gt_index, hit_at_50, hit_at_50_with, iou, BoundingBox};
pub use model::{
    backward, cosine_scores, load_checkpoint, loss, save_checkpoint, GradientSet, ScoreVector,
    TransformModel,
};
pub use optim::{learning_rate, step, OptimizerConfig, OptimizerState};
pub use synth::{generate_synthetic, write_synthetic, SynthConfig};
