//! Cross-attention non-local feature distillation for dense prediction.
//!
//! The crate carries its own small reverse-mode autodiff record
//! ([`autograd::Graph`]) and builds on it:
//!
//! * [`can`]: the Can block (dot-product, Gaussian and embedded Gaussian
//!   affinities, teacher-side max pooling, residual output projection) and the
//!   student channel aligner;
//! * [`distill`]: instance-normalised feature loss and the combined objective;
//! * [`optim`]: SGD with momentum and multi-step decay;
//! * [`toy`]: a synthetic pixel-labelling task with small teacher / student nets;
//! * [`gradcheck`]: central finite-difference verification of every gradient.
//!
//! Everything is generic over the element type ([`Scalar`], `f32` or `f64`);
//! the aliases below fix it to `f64`, which gradient checking requires.

pub mod autograd;
pub mod can;
pub mod distill;
mod error;
pub mod gradcheck;
pub mod optim;
mod scalar;
pub mod tensor;
pub mod toy;

pub use autograd::{Graph, Var};
pub use can::{AffinityKind, CanBlockConfig, CanBlockParams, CanBlockWeights, ChannelAligner, Normalization, PoolScale};
pub use distill::{DistillConfig, InstanceNormConfig, LossBreakdown};
pub use error::{Error, Result};
pub use optim::{OptimizerState, SgdConfig};
pub use scalar::Scalar;
pub use tensor::{ParamStore, Shape, Tensor};

pub type Graph64 = Graph<f64>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type CanBlockParams64 = CanBlockParams<f64>;
pub type ChannelAligner64 = ChannelAligner<f64>;
pub type ToyNet64 = toy::ToyNet<f64>;
pub type OptimizerState64 = OptimizerState<f64>;

pub type Graph32 = Graph<f32>;
pub type Tensor32 = Tensor<f32>;
