//! Fundus image classification: data handling, models, training and analysis.

pub mod dataset;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod graph;
pub mod kernels;
pub mod loader;
pub mod modelzoo;
pub mod nn;
pub mod plot;
pub mod preprocess;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use modelzoo::{build_model, build_siamese, Backbone, ModelHandle, ModelInput, ModelSpec, Pretrained, Regime, SiameseSpec};
pub use preprocess::{AugmentationPolicy, NormalizationStats, PlanarImage};
pub use tensor::Tensor;
pub use dataset::{DualEyeSample, Label, LabeledSample};
pub use distillation::{KdConfig, KlDirection};
pub use evaluation::{ConfusionCounts, MetricsReport};
pub use explain::Heatmap;
pub use loader::ImageSet;
pub use synthdata::SynthSpec;
pub use training::{TrainConfig, TrainResult};
