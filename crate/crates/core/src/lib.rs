//! Buffer-free continual learning for variable-modality 3D lesion segmentation.
//!
//! The crate trains one mixture-of-experts UNet on a sequence of datasets that
//! differ in modality set and pathology, distilling from the previous session's
//! frozen model at both the response (KL) and latent (cosine) level, and scores
//! the run with the usual train-test-matrix metrics.

pub mod domain;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use domain::{DomainToken, ModalityUniverse};
pub use error::{Error, Result};
pub use tensor::{Dims, FeatureMap};
