//! Local resolution of a template built by groupwise image registration.
//!
//! Registered images are smoothed with a growing Gaussian bandwidth until the
//! pixelwise empirical quantile range of the stack falls below a threshold.
//! The bandwidth at which this first happens, `sigma*`, is the resolution of
//! the template at that pixel, in pixels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod io;
pub mod model;
pub mod registration;
pub mod resolution;
pub mod smoothing;
pub mod viz;

pub use error::{Error, Result};
pub use grid::{ImageGrid, ImageStack};



pub use registration::{
    groupwise_register, Norm, RegistrationConfig, RegistrationResult, Transform, TransformKind,
};
pub use resolution::{resolution_measure, threshold_value, ResolutionConfig, ResolutionField};
pub use viz::{build_overlay, Bar, BarOverlay, OverlayOptions, SliceSpec};
