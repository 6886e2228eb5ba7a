//! Cross-attention multimodal masked autoencoder for paired SAR/optical
//! imagery, with a synthetic data generator and downstream evaluation.

// Config validation writes `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod patch;
pub mod probe;
pub mod runconfig;
pub mod tensor;
pub mod train;

pub use autodiff::{AttentionMap, Grads, Session, Tape, Var};
pub use config::{DecoderKv, MaskStrategy, ModalityCondition, ModelConfig, Task, Variant};
pub use mask::MaskPlan;
pub use model::{Architecture, FusMae};
pub use checkpoint::Checkpoint;
pub use data::{DataConfig, Dataset, SamplePair};
pub use error::{Error, Result};
pub use params::{GradMap, ParamId, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
