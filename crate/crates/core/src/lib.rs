//! Joint body/part detection with an extended per-anchor representation:
//! each prediction carries a box, objectness, class scores and `k` center
//! offsets pointing from a body to its parts.

pub mod association;
pub mod config;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod representation;
pub mod synthscene;
pub mod trainer;

pub use geometry::{BBox, Frame, GeometryError};
