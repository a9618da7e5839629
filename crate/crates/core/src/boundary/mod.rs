//! Boundary-driven instance refinement: Canny edges, line-maximum affinity
//! and random-walk propagation of instance seeds.

pub mod affinity;
pub mod canny;
pub mod walk;

pub use affinity::{build_affinity, AffinityOperator};
pub use canny::{canny, CannyConfig, CannyMode};
pub use walk::{random_walk, RandomWalkConfig};
