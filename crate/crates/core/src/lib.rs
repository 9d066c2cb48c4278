//! Masked multi-query slot attention for unsupervised object discovery over
//! precomputed patch-token features.

pub mod assignment;
pub mod autograd;
pub mod config;
pub mod decoder;
pub mod error;
pub mod features;
pub mod fusion;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod slot_attention;
pub mod tensor;
pub mod trainer;

pub use assignment::{Assignment, Matcher, Objective};
pub use config::RunConfig;
pub use decoder::{DecodedScene, DecoderParams, PosEncoding};
pub use error::{Error, Result};
pub use features::{FeatureMap, GroundTruth, LabelGrid, SyntheticSceneSpec, TokenKind};
pub use fusion::{Metric, ReferenceHead, SimilarityMatrix};
pub use masking::{MaskReport, MaskStrategy, MaskingConfig};
pub use metrics::{EvalReport, SegmentationResult};
pub use model::{Model, ModelConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use pipeline::{infer, InferOptions, InferenceOutput, MaskSource};
pub use slot_attention::{AttentionState, HeadBank, SlotSet};
pub use tensor::Tensor;
pub use trainer::{HeadSelect, TrainConfig, TrainState};
