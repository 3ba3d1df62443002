pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod flow_matching;
pub mod geometry;
pub mod isometry_trainer;
pub mod manifold_metrics;
pub mod node_diffeo;
pub mod numerics;
pub mod persist;

pub use error::{Error, Result};
