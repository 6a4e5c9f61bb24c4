//! Desk-scale dense-prediction task: a procedural pixel-labelling dataset and
//! small convolutional teacher / student networks.

mod data;
mod eval;
mod net;

pub use data::{generate_sample, generate_sample_with, ShapeCount, SyntheticSample, NOISE_SIGMA};
pub use eval::{argmax_labels, Confusion};
pub use net::{task_loss, Activation, NetOutput, ToyNet, ToyNetSpec};
