//! Hybrid CNN + transformer image classifier that discards uninformative
//! feature-map patches (attentive patch pooling) and progressively drops
//! transformer tokens scored by class-token attention (attentive token
//! pooling).
//!
//! All math is generic over [`Scalar`] (`f32` or `f64`); the `*64` aliases
//! below are what training, gradient checks and checkpoints use.

pub mod analysis;
pub mod app;
pub mod data;
pub mod error;
pub mod model;
pub mod scalar;
pub mod stem;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use app::{AttentionMap2D, CriterionKind, LanetParams, PatchSelection};
pub use error::{ApvitError, Result};
pub use model::{
    ApvitConfig, ApvitParams, Diagnostics, ForwardOptions, ForwardPass, HeadKind, PoolingMode,
    Selections,
};
pub use scalar::Scalar;
pub use stem::{FeatureMap, StemConfig};
pub use tensor::Tensor;
pub use transformer::{AtpVariant, KeepSchedule, TokenSeq};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Params64 = ApvitParams<f64>;
pub type Params32 = ApvitParams<f32>;
pub type Diagnostics64 = Diagnostics<f64>;
