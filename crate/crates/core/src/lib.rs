//! Targeted universal adversarial perturbations (TUPs) and region
//! adversarial training (RAT) on small image classifiers.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix
//! the precision for callers that do not care.

pub mod attacks;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rat;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tup;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Classifier32 = nn::Classifier<f32>;
pub type Classifier64 = nn::Classifier<f64>;
pub type Dataset32 = data::LabeledDataset<f32>;
pub type Dataset64 = data::LabeledDataset<f64>;
pub type TupResult32 = tup::TupResult<f32>;
pub type TupResult64 = tup::TupResult<f64>;
