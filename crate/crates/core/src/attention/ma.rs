//! Mutual attention: a channel attention vector and a spatial attention map,
//! each applied to the input and summed.
//!
//! ```text
//! F_c = sigmoid(MLP(avgpool(f)) + MLP(maxpool(f)))      per channel
//! F_s = sigmoid(conv7x7([mean_c(f); max_c(f)]))          per pixel
//! out = f * F_c + f * F_s
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::layers::{sigmoid, Conv2d, Linear};
use crate::error::{Error, Result};
use crate::maps::DenseMap;

pub const REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct MaWeights {
    pub channels: usize,
    /// Shared MLP, `C -> max(1, C / 16) -> C` with ReLU in between.
    pub hidden: Linear,
    pub output: Linear,
    /// Two input channels (mean, max) to one.
    pub spatial: Conv2d,
    pub seed: u64,
}

impl MaWeights {
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden_width = (channels / REDUCTION).max(1);
        Self {
            channels,
            hidden: Linear::seeded(&mut rng, channels, hidden_width),
            output: Linear::seeded(&mut rng, hidden_width, channels),
            spatial: Conv2d::seeded(&mut rng, 2, 1, (SPATIAL_KERNEL, SPATIAL_KERNEL)),
            seed,
        }
    }

    fn mlp(&self, x: &[f32]) -> Vec<f32> {
        let mut hidden = self.hidden.forward(x);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        self.output.forward(&hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaOutput {
    pub output: DenseMap,
    /// Global average and max of each channel.
    pub avg_pool: Vec<f32>,
    pub max_pool: Vec<f32>,
    /// `F_c`, one value per channel.
    pub channel_attention: Vec<f32>,
    /// `F_s`, single-channel map.
    pub spatial_attention: DenseMap,
}

pub fn ma_forward(f: &DenseMap, weights: &MaWeights) -> Result<DenseMap> {
    ma_forward_detailed(f, weights).map(|o| o.output)
}

pub fn ma_forward_detailed(f: &DenseMap, weights: &MaWeights) -> Result<MaOutput> {
    let c = f.channels();
    if c != weights.channels {
        return Err(Error::ShapeMismatch(format!(
            "attention weights expect {} channels, got {c}",
            weights.channels
        )));
    }
    let n = f.pixels();
    if n == 0 || c == 0 {
        return Err(Error::InvalidArgument("empty feature map".into()));
    }

    let mut sum = vec![0.0f64; c];
    let mut max_pool = vec![f32::NEG_INFINITY; c];
    for px in f.data().chunks_exact(c) {
        for (k, &v) in px.iter().enumerate() {
            sum[k] += v as f64;
            max_pool[k] = max_pool[k].max(v);
        }
    }
    let avg_pool: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
    let channel_attention: Vec<f32> = weights
        .mlp(&avg_pool)
        .iter()
        .zip(weights.mlp(&max_pool))
        .map(|(a, b)| sigmoid(a + b))
        .collect();

    let mut pooled = Vec::with_capacity(2 * n);
    for px in f.data().chunks_exact(c) {
        let mean = (px.iter().map(|&v| v as f64).sum::<f64>() / c as f64) as f32;
        let max = px.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        pooled.extend_from_slice(&[mean, max]);
    }
    let pooled = DenseMap::new(f.height(), f.width(), 2, pooled)?;
    let mut spatial_attention = weights.spatial.forward(&pooled)?;
    spatial_attention
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = sigmoid(*v));

    let mut output = f.clone();
    for (i, px) in output.data_mut().chunks_exact_mut(c).enumerate() {
        let s = spatial_attention.data()[i];
        for (v, &a) in px.iter_mut().zip(&channel_attention) {
            *v = *v * a + *v * s;
        }
    }
    Ok(MaOutput {
        output,
        avg_pool,
        max_pool,
        channel_attention,
        spatial_attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_annihilated() {
        let w = MaWeights::seeded(32, 5);
        let f = DenseMap::zeros(9, 9, 32);
        let out = ma_forward_detailed(&f, &w).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.0));
        assert!(out
            .channel_attention
            .iter()
            .chain(out.spatial_attention.data())
            .all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn constant_channels_pool_equal() {
        let w = MaWeights::seeded(20, 9);
        let f = DenseMap::from_fn(8, 8, 20, |_, _, c| c as f32 * 0.1 - 0.7);
        let out = ma_forward_detailed(&f, &w).unwrap();
        assert_eq!(out.avg_pool, out.max_pool);
        // Channel attention reduces to sigmoid(2 * MLP(pooled)).
        let mlp = w.mlp(&out.avg_pool);
        for (a, m) in out.channel_attention.iter().zip(mlp) {
            assert_eq!(*a, sigmoid(m + m));
        }
    }

    #[test]
    fn channel_mismatch() {
        let w = MaWeights::seeded(4, 1);
        assert!(ma_forward(&DenseMap::zeros(3, 3, 5), &w).is_err());
    }
}
