//! Entity-aware / motion-aware Transformer for language-driven temporal action
//! localization, with its own reverse-mode autodiff engine, a synthetic grounding
//! dataset generator, training, evaluation and experiment drivers.

pub mod checkpoint;
pub mod config;
pub mod cqa;
pub mod dataset;
pub mod entity;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod params;
pub mod query;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use metrics::{evaluate, temporal_iou, MetricReport, Span, DEFAULT_THRESHOLDS};
pub use model::{Model, Prediction};
pub use motion::{decode_boundaries, BoundaryPrediction};
pub use params::{ParamId, ParamStore};
pub use query::{Lexicon, QuerySample, Vocabulary, WordClass};
pub use synth::{GenConfig, GroundedSample, Split, SyntheticSplits};
pub use tensor::Tensor;
pub use train::{train, TrainOptions, TrainingReport};
