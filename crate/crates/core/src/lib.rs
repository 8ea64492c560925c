//! Streaming, self-supervised actor localization by hierarchical predictive
//! learning over per-frame backbone feature maps.
//!
//! The crate is organized bottom-up: [`numerics`] and [`param`] supply the
//! tensor kernels, [`lstm`] and [`attention`] the learned components,
//! [`engine`] the continual training loop, [`localizer`] the box selection,
//! [`eval`] the metrics, and [`io`] / [`checkpoint`] the on-disk formats.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod localizer;
pub mod lstm;
pub mod numerics;
pub mod param;

pub use config::RunConfig;
pub use engine::{Model, StepReport, Trainer, VideoStream};
pub use error::{Error, Result};
pub use localizer::{BoundingBox, LocalizationResult};
pub use numerics::{FeatureMap, SpatialMap, Tensor};
