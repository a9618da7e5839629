//! Salient instance assembly from dense network outputs.
//!
//! The crate turns a saliency map, a boundary map and a per-pixel offset
//! field into an instance labeling, and carries the surrounding machinery
//! needed to test that path without trained networks:
//!
//! * [`maps`] and [`fmap`]: grid types and the `FMAP` binary format.
//! * [`centroid`]: offset chasing, centroid extraction, pixel assignment,
//!   salient-instance filtering and the subitizing loss/gradient.
//! * [`boundary`]: Canny edges, line-maximum boundary affinity and the
//!   random-walk refinement of instance seeds.
//! * [`attention`]: seeded forward passes of the cross-layer mixing,
//!   mutual attention and boundary enhancement blocks.
//! * [`crf`]: exact mean-field dense CRF.
//! * [`pts`]: progressive pseudo-label training loop with EMA refreshing.
//! * [`eval`]: mask IoU and average precision.
//! * [`synth`]: synthetic scenes with consistent ground truth.
//! * [`pipeline`]: the end-to-end `assemble` path and its configuration.
//!
//! Per-pixel work runs on rayon when the `parallel` feature is enabled
//! (the default). Every parallel loop writes to disjoint outputs and keeps
//! a fixed reduction order, so results are bit-identical with the
//! sequential build.

pub mod attention;
pub mod boundary;
pub mod centroid;
pub mod crf;
pub mod error;
pub mod eval;
pub mod fmap;
pub mod maps;
pub mod pipeline;
pub mod pts;
pub mod synth;

mod par;

pub use error::{Error, Result};
pub use maps::{DenseMap, GrayImage, InstanceLabelMap, OffsetField};
