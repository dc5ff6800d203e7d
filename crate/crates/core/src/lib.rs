//! Speaker embedding toolkit built around the ReDimNet architecture family.

pub mod audio;
pub mod config;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
pub use audio::{FeatureConfig, FeatureExtractor, Waveform};
pub use config::Config;
pub use io::{Checkpoint, EmbeddingStore};
pub use loss::{ClassifierHead, LossConfig, LossKind, Stage};
pub use metrics::{ScoreSet, Trial};
pub use model::{Model, ModelConfig, StageConfig, StageShapeRow};
pub use nn::{Block1dKind, Block2dKind, Mode, Module};
pub use train::{Dataset, TrainConfig};
