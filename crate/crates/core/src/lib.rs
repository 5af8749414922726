//! Geometry, map projection and synthetic benchmark generation for
//! monocular camera localization against a point-cloud map.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod projection;
pub mod synthworld;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, PerturbationSpec, Pose};
pub use projection::{Clips, DepthImage, PointCloudMap};
