//! Cooperative training of a segmentation network and a shape-correction
//! network, with hard examples generated by masking latent codes.

pub mod autodiff;
mod binio;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod networks;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
