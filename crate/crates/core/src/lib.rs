//! A small, dependency-light attentive single-shot detector.

pub mod attention;
pub mod boxes;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod grad;
pub mod gradcheck;
pub mod heatmap;
pub mod layers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
