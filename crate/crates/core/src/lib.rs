//! Light field probes: a factorized scene representation, a differentiable
//! volume renderer, a trainer and a synthetic scene oracle.

pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod grids;
pub mod metrics;
pub mod probe_field;
pub mod raster;
pub mod real;
pub mod renderer;
pub mod scenekit;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{CameraModel, Ray, Vec3};
pub use probe_field::{FieldConfig, ProbeField};
pub use real::Real;
