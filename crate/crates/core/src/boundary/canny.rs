//! Canny edge detection with median-derived automatic thresholds.

use crate::error::{Error, Result};
use crate::maps::{DenseMap, GrayImage};
use crate::par;

/// Spread of the automatic thresholds around the median intensity.
pub const AUTO_SPREAD: f64 = 0.33;
pub const DEFAULT_SIGMA: f64 = 1.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CannyMode {
    /// Thresholds from the image median `m`:
    /// `low = max(0, (1 - 0.33) m)`, `high = min(255, (1 + 0.33) m)`.
    Auto,
    Manual {
        low: f64,
        high: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyConfig {
    pub mode: CannyMode,
    pub gaussian_sigma: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self::auto()
    }
}

impl CannyConfig {
    pub fn auto() -> Self {
        Self {
            mode: CannyMode::Auto,
            gaussian_sigma: DEFAULT_SIGMA,
        }
    }

    /// Manual thresholds, clipped to `[0, 255]`; `low < high` must hold
    /// after clipping.
    pub fn manual(low: f64, high: f64) -> Result<Self> {
        let (low, high) = (low.clamp(0.0, 255.0), high.clamp(0.0, 255.0));
        if !(low < high) {
            return Err(Error::InvalidArgument(format!(
                "canny thresholds need low < high, got {low} and {high}"
            )));
        }
        Ok(Self {
            mode: CannyMode::Manual { low, high },
            gaussian_sigma: DEFAULT_SIGMA,
        })
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.gaussian_sigma = sigma;
        self
    }

    pub fn thresholds(&self, image: &GrayImage) -> (f64, f64) {
        match self.mode {
            CannyMode::Auto => auto_thresholds(image),
            CannyMode::Manual { low, high } => (low, high),
        }
    }
}

/// Median intensity; the mean of the two middle values for even counts.
pub fn median_intensity(image: &GrayImage) -> f64 {
    let n = image.intensity().len();
    if n == 0 {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for &v in image.intensity() {
        hist[v as usize] += 1;
    }
    let nth = |k: usize| {
        let mut seen = 0;
        for (v, &c) in hist.iter().enumerate() {
            seen += c;
            if seen > k {
                return v as f64;
            }
        }
        255.0
    };
    if n % 2 == 1 {
        nth(n / 2)
    } else {
        (nth(n / 2 - 1) + nth(n / 2)) / 2.0
    }
}

pub fn auto_thresholds(image: &GrayImage) -> (f64, f64) {
    let m = median_intensity(image);
    (
        ((1.0 - AUTO_SPREAD) * m).max(0.0),
        ((1.0 + AUTO_SPREAD) * m).min(255.0),
    )
}

/// Runs blur, Sobel, non-maximum suppression and hysteresis. Returns a
/// single-channel `{0, 1}` map. The one-pixel image border is never an edge.
///
/// Thresholds are compared against the L2 Sobel magnitude of the blurred
/// intensities (0..255 scale).
pub fn canny(image: &GrayImage, cfg: &CannyConfig) -> Result<DenseMap> {
    if !(cfg.gaussian_sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {}",
            cfg.gaussian_sigma
        )));
    }
    let (h, w) = (image.height(), image.width());
    let first = image.intensity().first().copied();
    if h < 3 || w < 3 || image.intensity().iter().all(|&v| Some(v) == first) {
        return Ok(DenseMap::zeros(h, w, 1));
    }
    let (low, high) = cfg.thresholds(image);
    let blurred = gaussian_blur(image, cfg.gaussian_sigma);
    let (gx, gy) = sobel(&blurred, h, w);
    let magnitude: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let thin = non_maximum_suppression(&magnitude, &gx, &gy, h, w);
    let edges = hysteresis(&thin, low, high, h, w);
    DenseMap::new(
        h,
        w,
        1,
        edges
            .into_iter()
            .map(|e| if e { 1.0 } else { 0.0 })
            .collect(),
    )
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with replicated borders.
fn gaussian_blur(image: &GrayImage, sigma: f64) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src: Vec<f64> = image.intensity().iter().map(|&v| v as f64).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal = par::map_range(h * w, |i| {
        let (y, x) = (i / w, (i % w) as isize);
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * src[y * w + clamp(x + t as isize - r, w)])
            .sum::<f64>()
    });
    par::map_range(h * w, |i| {
        let (y, x) = ((i / w) as isize, i % w);
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * horizontal[clamp(y + t as isize - r, h) * w + x])
            .sum::<f64>()
    })
}

fn sobel(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| {
        src[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    let grads = par::map_range(h * w, |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        (gx, gy)
    });
    grads.into_iter().unzip()
}

/// Keeps a pixel when it beats the neighbor before it along the gradient
/// direction and is not beaten by the one after it, so a two-pixel plateau
/// thins to its first pixel.
fn non_maximum_suppression(mag: &[f64], gx: &[f64], gy: &[f64], h: usize, w: usize) -> Vec<f64> {
    par::map_range(h * w, |i| {
        let (y, x) = (i / w, i % w);
        if y == 0 || x == 0 || y + 1 == h || x + 1 == w || mag[i] == 0.0 {
            return 0.0;
        }
        let mut angle = gy[i].atan2(gx[i]).to_degrees();
        if angle < 0.0 {
            angle += 180.0;
        }
        // Neighbors as (before, after) in raster order.
        let (before, after) = if !(22.5..157.5).contains(&angle) {
            (i - 1, i + 1)
        } else if angle < 67.5 {
            (i - w - 1, i + w + 1)
        } else if angle < 112.5 {
            (i - w, i + w)
        } else {
            (i - w + 1, i + w - 1)
        };
        if mag[i] > mag[before] && mag[i] >= mag[after] {
            mag[i]
        } else {
            0.0
        }
    })
}

fn hysteresis(thin: &[f64], low: f64, high: f64, h: usize, w: usize) -> Vec<bool> {
    let mut edge = vec![false; h * w];
    let mut stack = Vec::new();
    for i in 0..h * w {
        if thin[i] > 0.0 && thin[i] >= high && !edge[i] {
            edge[i] = true;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (y, x) = ((j / w) as isize, (j % w) as isize);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let k = ny as usize * w + nx as usize;
                        if !edge[k] && thin[k] > 0.0 && thin[k] >= low {
                            edge[k] = true;
                            stack.push(k);
                        }
                    }
                }
            }
        }
    }
    edge
}
