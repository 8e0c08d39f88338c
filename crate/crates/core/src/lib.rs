//! Volumetric toolkit for perinatal brain MRI analysis.
//!
//! The crate covers the full desk-scale workflow: super-resolution
//! reconstruction from orthogonal slice stacks, brain extraction and bias
//! correction, multi-resolution multi-channel registration, temporal and
//! multi-subject atlas handling with label fusion, EM tissue segmentation,
//! cortical surface extraction and per-vertex surface features. Synthetic
//! phantoms stand in for clinical data so every stage is testable end to end.

pub mod error;
pub mod geometry;
pub mod rng;
pub(crate) mod parallel;
pub mod volume;
pub mod field;
pub mod filter;
pub mod nifti;
pub mod tissue;
pub mod phantom;
pub mod morphology;
pub mod preprocess;
pub mod registration;
pub mod atlas;
pub mod em;

pub use error::{Error, Result};
pub use field::DeformationField;
pub use geometry::AffineTransform;
pub use volume::{Geometry, Interp, LabelVolume, ProbabilityMaps, Volume, UNCLASSIFIED};
