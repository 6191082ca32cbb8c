//! Datasets, loaders and sampling helpers.

pub mod cifar;
mod dataset;
pub mod idx;

pub use dataset::{make_synthetic_gaussians, sample_x, sample_x_indices, split_indices, split_train_val, LabeledDataset, SplitSpec};

/// Environment variable naming the directory with raw dataset files.
pub const DATA_DIR_ENV: &str = "TUP_DATA_DIR";
