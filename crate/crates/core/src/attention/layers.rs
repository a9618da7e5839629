//! Minimal forward-only layers over [`DenseMap`] feature tensors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::DenseMap;
use crate::par;

/// 2-D convolution, stride 1, zero "same" padding.
///
/// Weights are stored `[out][ky][kx][in]` so that the inner product over
/// input channels is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * kernel.0 * kernel.1 * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    /// Uniform in `[-k, k]` with `k = 1 / sqrt(fan_in)` for weights and biases.
    pub fn seeded(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let k = 1.0 / ((in_channels * kernel.0 * kernel.1) as f32).sqrt();
        conv.weight
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-k..=k));
        conv.bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-k..=k));
        conv
    }

    #[inline]
    fn index(&self, o: usize, ky: usize, kx: usize) -> usize {
        ((o * self.kernel.0 + ky) * self.kernel.1 + kx) * self.in_channels
    }

    pub fn weight_at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weight[self.index(o, ky, kx) + i]
    }

    pub fn set_weight(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f32) {
        let idx = self.index(o, ky, kx) + i;
        self.weight[idx] = v;
    }

    pub fn forward(&self, input: &DenseMap) -> Result<DenseMap> {
        if input.channels() != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let (kh, kw) = self.kernel;
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let cin = self.in_channels;
        let cout = self.out_channels;
        let src = input.data();
        let mut out = vec![0.0f32; h * w * cout];
        par::for_each_chunk_mut(&mut out, (w * cout).max(1), |y, row| {
            let mut acc = vec![0.0f32; cout];
            for x in 0..w {
                acc.copy_from_slice(&self.bias);
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - ph;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = x as isize + kx as isize - pw;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (sy as usize * w + sx as usize) * cin;
                        let px = &src[base..base + cin];
                        for (o, a) in acc.iter_mut().enumerate() {
                            let wk = &self.weight[self.index(o, ky, kx)..][..cin];
                            *a += wk.iter().zip(px).map(|(p, q)| p * q).sum::<f32>();
                        }
                    }
                }
                row[x * cout..(x + 1) * cout].copy_from_slice(&acc);
            }
        });
        DenseMap::new(h, w, cout, out)
    }
}

/// Fully connected layer, weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn seeded(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Self {
        let k = 1.0 / (in_features as f32).sqrt();
        Self {
            in_features,
            out_features,
            weight: (0..in_features * out_features)
                .map(|_| rng.gen_range(-k..=k))
                .collect(),
            bias: (0..out_features).map(|_| rng.gen_range(-k..=k)).collect(),
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.in_features);
        (0..self.out_features)
            .map(|o| {
                self.bias[o]
                    + self.weight[o * self.in_features..(o + 1) * self.in_features]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
            })
            .collect()
    }
}

pub fn relu_in_place(map: &mut DenseMap) {
    map.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

/// Nearest-neighbor resize: output `(y, x)` reads input
/// `(floor(y h_in / h_out), floor(x w_in / w_out))`.
pub fn upsample_nearest(map: &DenseMap, height: usize, width: usize) -> DenseMap {
    let (h, w, c) = (map.height(), map.width(), map.channels());
    if (h, w) == (height, width) {
        return map.clone();
    }
    DenseMap::from_fn(height, width, c, |y, x, ch| {
        map.get(y * h / height, x * w / width, ch)
    })
}

/// Stacks maps of equal spatial size along the channel axis.
pub fn concat_channels(maps: &[&DenseMap]) -> Result<DenseMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let (h, w) = (first.height(), first.width());
    for m in maps {
        m.expect_size("concatenated map", h, w)?;
    }
    let total: usize = maps.iter().map(|m| m.channels()).sum();
    let mut data = Vec::with_capacity(h * w * total);
    for i in 0..h * w {
        for m in maps {
            data.extend_from_slice(m.pixel(i));
        }
    }
    DenseMap::new(h, w, total, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_kernel_copies_input() {
        let mut conv = Conv2d::zeros(2, 2, (3, 3));
        conv.set_weight(0, 0, 1, 1, 1.0);
        conv.set_weight(1, 1, 1, 1, 1.0);
        let x = DenseMap::from_fn(4, 5, 2, |y, x, c| (y * 10 + x) as f32 - c as f32);
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn same_padding_sum_kernel() {
        let mut conv = Conv2d::zeros(1, 1, (1, 3));
        for kx in 0..3 {
            conv.set_weight(0, 0, 0, kx, 1.0);
        }
        let x = DenseMap::new(1, 4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(conv.forward(&x).unwrap().data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn seeded_weights_bounded_and_reproducible() {
        let a = Conv2d::seeded(&mut ChaCha8Rng::seed_from_u64(3), 4, 2, (3, 3));
        let b = Conv2d::seeded(&mut ChaCha8Rng::seed_from_u64(3), 4, 2, (3, 3));
        assert_eq!(a, b);
        let k = 1.0 / 6.0;
        assert!(a.weight.iter().chain(&a.bias).all(|w| w.abs() <= k));
    }

    #[test]
    fn upsample_and_concat() {
        let m = DenseMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest(&m, 4, 4);
        assert_eq!(up.get(3, 0, 0), 3.0);
        assert_eq!(up.get(1, 3, 0), 2.0);
        let c = concat_channels(&[&m, &m]).unwrap();
        assert_eq!(c.channels(), 2);
        assert_eq!(c.pixel(3), &[4.0, 4.0]);
        assert!(concat_channels(&[&m, &up]).is_err());
    }
}
