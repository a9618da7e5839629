//! Cross-layer feature mixing.
//!
//! Five pyramid levels are resized to the finest level, projected to a
//! common width, concatenated level-major, channel-shuffled, concatenated
//! again with the unshuffled stack and projected back per level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::layers::{concat_channels, upsample_nearest, Conv2d};
use crate::error::{Error, Result};
use crate::maps::DenseMap;

pub const LEVELS: usize = 5;
pub const MIXED_CHANNELS: usize = 256;

/// Five feature maps, finest first, with non-increasing spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<DenseMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<DenseMap>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(Error::InvalidArgument(format!(
                "pyramid needs {LEVELS} levels, got {}",
                levels.len()
            )));
        }
        for (k, pair) in levels.windows(2).enumerate() {
            if pair[1].height() > pair[0].height() || pair[1].width() > pair[0].width() {
                return Err(Error::ShapeMismatch(format!(
                    "level {} is larger than level {}",
                    k + 2,
                    k + 1
                )));
            }
        }
        if let Some(k) = levels.iter().position(|l| l.channels() == 0) {
            return Err(Error::InvalidArgument(format!(
                "level {} has no channels",
                k + 1
            )));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[DenseMap] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<DenseMap> {
        self.levels
    }
}

/// Where channel `index` of a `groups x per_group` stack lands after the
/// reshape `[groups, per_group] -> transpose -> flatten`:
/// `per_group * a + b` maps to `groups * b + a`.
pub fn shuffle_index(index: usize, groups: usize, per_group: usize) -> usize {
    let (a, b) = (index / per_group, index % per_group);
    groups * b + a
}

/// Applies [`shuffle_index`] to the channel axis of every pixel.
pub fn channel_shuffle(map: &DenseMap, groups: usize) -> Result<DenseMap> {
    let c = map.channels();
    if groups == 0 || c % groups != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{c} channels do not split into {groups} groups"
        )));
    }
    let per_group = c / groups;
    let mut data = vec![0.0f32; map.data().len()];
    for (src, dst) in map.data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
        for (k, &v) in src.iter().enumerate() {
            dst[shuffle_index(k, groups, per_group)] = v;
        }
    }
    DenseMap::new(map.height(), map.width(), c, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfmWeights {
    pub width: usize,
    /// Per-level 1x1 projection to `width` channels.
    pub reduce: Vec<Conv2d>,
    /// Per-level 1x1 projection of the `2 * LEVELS * width` mixed stack.
    pub fuse: Vec<Conv2d>,
    pub seed: u64,
}

impl CfmWeights {
    pub fn seeded(in_channels: [usize; LEVELS], seed: u64) -> Self {
        Self::seeded_with_width(in_channels, MIXED_CHANNELS, seed)
    }

    pub fn seeded_with_width(in_channels: [usize; LEVELS], width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reduce = in_channels
            .iter()
            .map(|&c| Conv2d::seeded(&mut rng, c, width, (1, 1)))
            .collect();
        let fuse = (0..LEVELS)
            .map(|_| Conv2d::seeded(&mut rng, 2 * LEVELS * width, width, (1, 1)))
            .collect();
        Self {
            width,
            reduce,
            fuse,
            seed,
        }
    }
}

pub fn cfm_forward(pyramid: &FeaturePyramid, weights: &CfmWeights) -> Result<FeaturePyramid> {
    let levels = pyramid.levels();
    let (h, w) = (levels[0].height(), levels[0].width());
    let projected = levels
        .iter()
        .zip(&weights.reduce)
        .map(|(f, conv)| conv.forward(&upsample_nearest(f, h, w)))
        .collect::<Result<Vec<_>>>()?;
    let stacked = concat_channels(&projected.iter().collect::<Vec<_>>())?;
    let shuffled = channel_shuffle(&stacked, LEVELS)?;
    let mixed = concat_channels(&[&stacked, &shuffled])?;
    let out = weights
        .fuse
        .iter()
        .map(|conv| conv.forward(&mixed))
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pyramid(channels: [usize; LEVELS]) -> FeaturePyramid {
        let sizes = [8, 4, 4, 2, 1];
        let levels = sizes
            .iter()
            .zip(channels)
            .enumerate()
            .map(|(k, (&s, c))| {
                DenseMap::from_fn(s, s, c, |y, x, ch| {
                    ((y * 7 + x * 3 + ch + k) % 5) as f32 * 0.2
                })
            })
            .collect();
        FeaturePyramid::new(levels).unwrap()
    }

    #[test]
    fn shuffle_closed_form() {
        for a in 0..5 {
            for b in 0..256 {
                assert_eq!(shuffle_index(256 * a + b, 5, 256), 5 * b + a);
            }
        }
    }

    #[test]
    fn shuffle_twice_with_swapped_roles_is_identity() {
        for k in 0..1280 {
            assert_eq!(shuffle_index(shuffle_index(k, 5, 256), 256, 5), k);
        }
    }

    #[test]
    fn output_shape_contract() {
        let pyr = pyramid([3, 4, 6, 8, 2]);
        let w = CfmWeights::seeded([3, 4, 6, 8, 2], 11);
        let out = cfm_forward(&pyr, &w).unwrap();
        for l in out.levels() {
            assert_eq!((l.height(), l.width(), l.channels()), (8, 8, 256));
        }
    }

    #[test]
    fn pyramid_validation() {
        let small = DenseMap::zeros(2, 2, 1);
        let big = DenseMap::zeros(4, 4, 1);
        assert!(FeaturePyramid::new(vec![small.clone(); 4]).is_err());
        assert!(FeaturePyramid::new(vec![
            small.clone(),
            big,
            small.clone(),
            small.clone(),
            small.clone()
        ])
        .is_err());
        let empty = DenseMap::zeros(2, 2, 0);
        assert!(FeaturePyramid::new(vec![
            small.clone(),
            small.clone(),
            empty,
            small.clone(),
            small
        ])
        .is_err());
    }
}
