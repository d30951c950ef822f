//! Attribute-conditioned painting translation: an asymmetric cycle GAN whose
//! forward generator is steered by artist, period and genre labels.

pub mod archive;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod losses;
pub mod networks;
pub mod params;
pub mod perceptual;
pub mod rng;
pub mod scalar;
pub mod schema;
pub mod tensor;
pub mod training;

pub use conditioning::{build_condition, AttributeSet, ConditionBatch, Mode};
pub use config::{load_config, parse_config, LossWeights, RunConfig};
pub use error::{Error, Result};
pub use rng::{seeded_rng, SeededRng};
pub use schema::{AttributeSchema, Axis, LabelTriple};
pub use tensor::{ImageTensor, Tensor};
pub use training::TrainState;
