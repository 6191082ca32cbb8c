//! Minimal differentiable classifiers: dense/conv layers with hand-written
//! backpropagation, cross-entropy training and gradient access for attacks.

mod layers;
pub mod loss;
mod model;
pub mod train;

pub use model::{Architecture, Classifier, Forward, Gradients, LossAndGrads, Trace};
pub use train::{fit, train_standard, OptimizerKind, TrainConfig, TrainLog};
