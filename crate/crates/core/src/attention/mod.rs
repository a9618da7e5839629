//! Seeded forward passes of the attention and boundary-enhancement blocks.
//!
//! Nothing here is trained; weights come from a seed so that tensor shapes,
//! the channel-mixing permutation and attention bounds can be checked.

pub mod be;
pub mod cfm;
pub mod layers;
pub mod ma;

pub use be::{be_forward, boundary_head, BeWeights, ResBlock};
pub use cfm::{cfm_forward, channel_shuffle, shuffle_index, CfmWeights, FeaturePyramid};
pub use layers::{Conv2d, Linear};
pub use ma::{ma_forward, ma_forward_detailed, MaOutput, MaWeights};
