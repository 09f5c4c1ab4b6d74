//! Text-guided feature-space semantic augmentation for single-domain
//! generalized object detection, at desk scale.
//!
//! The crate trains a small contrastive image-text encoder pair in-repo,
//! curates domain prompts from word-list fixtures, estimates additive
//! feature-map augmentations whose embedding-space effect matches
//! prompt-to-prompt shifts, trains a minimal two-stage detector with a
//! text-embedding classifier under those augmentations, and evaluates
//! cross-domain mAP on a synthetic multi-domain benchmark.
//!
//! All numeric kernels are generic over the scalar type ([`Scalar`], f32 or
//! f64); concrete f32 aliases are exported for the CLI paths.

pub mod ablation;
pub mod archive;
pub mod augment;
pub mod autodiff;
pub mod data;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod pca;
pub mod prompt;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Embedding, FeatureMap, Tensor};

/// Concrete f32 aliases used by the CLI and the on-disk formats.
pub type Tensor32 = Tensor<f32>;
pub type Embedding32 = Embedding<f32>;
pub type FeatureMap32 = FeatureMap<f32>;
