//! Segmentation of enhancing structures in 4D dynamic contrast-enhanced
//! volumes: the scan is over-segmented into perfusion-supervoxels (SLIC on
//! normalized PCA modes of the signal-enhancement curves), each supervoxel
//! is classified from enhancement and neighborhood features, and a
//! pieces-of-parts graphical model propagates global anatomical context to
//! refine the tumour probabilities.
//!
//! The [`pipeline`] module wires the stages together; [`phantom`] generates
//! synthetic cohorts with known labels for end-to-end validation.

pub mod classifier;
pub mod error;
pub mod features;
pub mod grid;
pub mod model;
pub mod nifti;
pub mod parts;
pub mod pca;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod supervoxel;
pub mod volume;

pub use error::{Error, Result};
