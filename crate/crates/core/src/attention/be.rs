//! Boundary enhancement: separable large-kernel convolutions of the image,
//! a short residual stack and a fusion with an edge map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::layers::{concat_channels, relu_in_place, sigmoid, upsample_nearest, Conv2d};
use crate::error::{Error, Result};
use crate::maps::DenseMap;

pub const RESIDUAL_BLOCKS: usize = 3;
pub const LARGE_KERNEL: usize = 7;

/// `out = x + conv2(relu(conv1(x)))`, 3x3 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn seeded(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        Self {
            conv1: Conv2d::seeded(rng, channels, channels, (3, 3)),
            conv2: Conv2d::seeded(rng, channels, channels, (3, 3)),
        }
    }

    /// All-zero weights; the block passes its input through unchanged.
    pub fn identity(channels: usize) -> Self {
        Self {
            conv1: Conv2d::zeros(channels, channels, (3, 3)),
            conv2: Conv2d::zeros(channels, channels, (3, 3)),
        }
    }

    pub fn forward(&self, x: &DenseMap) -> Result<DenseMap> {
        let mut t = self.conv1.forward(x)?;
        relu_in_place(&mut t);
        let mut out = self.conv2.forward(&t)?;
        out.data_mut()
            .iter_mut()
            .zip(x.data())
            .for_each(|(o, &v)| *o += v);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeWeights {
    pub channels: usize,
    pub horizontal: Conv2d,
    pub vertical: Conv2d,
    pub blocks: Vec<ResBlock>,
    /// `channels + 1` (features and edge map) to `2 * channels`.
    pub fuse: Conv2d,
    pub seed: u64,
}

impl BeWeights {
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizontal = Conv2d::seeded(&mut rng, 3, channels, (1, LARGE_KERNEL));
        let vertical = Conv2d::seeded(&mut rng, 3, channels, (LARGE_KERNEL, 1));
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|_| ResBlock::seeded(&mut rng, channels))
            .collect();
        let fuse = Conv2d::seeded(&mut rng, channels + 1, 2 * channels, (1, 1));
        Self {
            channels,
            horizontal,
            vertical,
            blocks,
            fuse,
            seed,
        }
    }
}

/// Returns `(f_b1, f_b2)`, each `channels` wide at image resolution.
pub fn be_forward(
    image: &DenseMap,
    edges: &DenseMap,
    weights: &BeWeights,
) -> Result<(DenseMap, DenseMap)> {
    image.expect_channels("image", 3)?;
    edges.expect_channels("edge map", 1)?;
    edges.expect_size("edge map", image.height(), image.width())?;
    let mut h = weights.horizontal.forward(image)?;
    relu_in_place(&mut h);
    let mut v = weights.vertical.forward(image)?;
    relu_in_place(&mut v);
    h.data_mut()
        .iter_mut()
        .zip(v.data())
        .for_each(|(a, &b)| *a += b);
    let mut x = h;
    for block in &weights.blocks {
        x = block.forward(&x)?;
    }
    let fused = weights.fuse.forward(&concat_channels(&[&x, edges])?)?;
    let c = weights.channels;
    let split = |offset: usize| {
        DenseMap::from_fn(fused.height(), fused.width(), c, |y, xx, ch| {
            fused.get(y, xx, offset + ch)
        })
    };
    Ok((split(0), split(c)))
}

/// Single-channel boundary probability from stacked features resized to
/// `(height, width)`.
pub fn boundary_head(
    features: &[&DenseMap],
    head: &Conv2d,
    height: usize,
    width: usize,
) -> Result<DenseMap> {
    if head.out_channels != 1 || head.kernel != (1, 1) {
        return Err(Error::InvalidArgument(
            "boundary head must be a 1x1 conv to one channel".into(),
        ));
    }
    let resized: Vec<DenseMap> = features
        .iter()
        .map(|f| upsample_nearest(f, height, width))
        .collect();
    let mut out = head.forward(&concat_channels(&resized.iter().collect::<Vec<_>>())?)?;
    out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_block_passes_through() {
        let x = DenseMap::from_fn(5, 6, 4, |y, x, c| (y + 2 * x) as f32 - c as f32 * 0.5);
        assert_eq!(ResBlock::identity(4).forward(&x).unwrap(), x);
    }

    #[test]
    fn output_shapes() {
        let img = DenseMap::from_fn(9, 11, 3, |y, x, c| ((y + x + c) % 4) as f32 * 0.25);
        let edges = DenseMap::zeros(9, 11, 1);
        let w = BeWeights::seeded(8, 2);
        let (b1, b2) = be_forward(&img, &edges, &w).unwrap();
        assert_eq!((b1.height(), b1.width(), b1.channels()), (9, 11, 8));
        assert_eq!((b2.height(), b2.width(), b2.channels()), (9, 11, 8));
        assert!(be_forward(&img, &DenseMap::zeros(9, 10, 1), &w).is_err());
    }

    #[test]
    fn head_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DenseMap::filled(4, 4, 2, 0.3);
        let b = DenseMap::filled(2, 2, 3, -0.8);
        let head = Conv2d::seeded(&mut rng, 5, 1, (1, 1));
        let out = boundary_head(&[&a, &b], &head, 4, 4).unwrap();
        assert_eq!(out.channels(), 1);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
