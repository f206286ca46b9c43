//! Generation and evaluation of part-prototype explanations.
//!
//! The crate covers the whole pipeline of a prototype-based image classifier
//! explanation: latent similarity maps and prototype projection
//! ([`proto`]), three patch-visualisation methods ([`saliency`]), deletion
//! and segmentation-based evaluation ([`metrics`]), file formats and the
//! command line ([`evalio`]), and synthetic models with known ground truth
//! ([`fixtures`]). Everything runs on the small CPU engine in [`tensor`].

pub mod error;
pub mod evalio;
pub mod fixtures;
pub mod metrics;
pub mod proto;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
