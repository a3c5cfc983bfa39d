//! Breast-mass classification toolkit: a pyramid of atrous convolutions,
//! channel attention, token self-attention and multi-scale fusion, trained
//! with a combined Dice + focal objective on a small reverse-mode autodiff
//! engine.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
