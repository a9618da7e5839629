//! Fully connected CRF refinement by exact mean-field iteration.
//!
//! Pairwise kernel between pixels `i != j`:
//!
//! ```text
//! k(i, j) = w1 exp(-|p_i - p_j|^2 / 2 sa^2 - |I_i - I_j|^2 / 2 sb^2)
//!         + w2 exp(-|p_i - p_j|^2 / 2 sg^2)
//! ```
//!
//! with Potts compatibility. Messages are summed over all pixel pairs, so one
//! iteration costs `O(N^2)`; this is meant for maps up to about 128x128.
//! Intensities are on the 0..255 scale.

use crate::error::{Error, Result};
use crate::maps::{DenseMap, GrayImage};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfConfig {
    /// Appearance (bilateral) kernel weight.
    pub w1: f64,
    /// Smoothness kernel weight.
    pub w2: f64,
    /// Spatial scale of the appearance kernel, pixels.
    pub sigma_alpha: f64,
    /// Intensity scale of the appearance kernel.
    pub sigma_beta: f64,
    /// Spatial scale of the smoothness kernel, pixels.
    pub sigma_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            w1: 4.0,
            w2: 3.0,
            sigma_alpha: 49.0,
            sigma_beta: 5.0,
            sigma_gamma: 3.0,
            iterations: 5,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(Error::OutOfRange("crf weights must be >= 0".into()));
        }
        if !(self.sigma_alpha > 0.0 && self.sigma_beta > 0.0 && self.sigma_gamma > 0.0) {
            return Err(Error::OutOfRange("crf sigmas must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::OutOfRange("crf iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Guidance image for the appearance kernel.
#[derive(Debug, Clone, Copy)]
pub enum CrfImage<'a> {
    Gray(&'a GrayImage),
    /// Three channels in `[0, 1]`, scaled by 255 for the intensity distance.
    Rgb(&'a DenseMap),
}

impl CrfImage<'_> {
    fn size(&self) -> (usize, usize) {
        match self {
            CrfImage::Gray(g) => (g.height(), g.width()),
            CrfImage::Rgb(m) => (m.height(), m.width()),
        }
    }
}

/// Tolerance on the per-pixel sum of the input probabilities.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Two-channel `[1 - s, s]` probabilities from a single-channel map.
pub fn unary_from_saliency(saliency: &DenseMap) -> Result<DenseMap> {
    saliency.expect_channels("saliency map", 1)?;
    saliency.check_probability()?;
    let data = saliency
        .data()
        .iter()
        .flat_map(|&s| {
            let s = s.clamp(0.0, 1.0);
            [1.0 - s, s]
        })
        .collect();
    DenseMap::new(saliency.height(), saliency.width(), 2, data)
}

pub fn crf_refine(prob: &DenseMap, image: CrfImage<'_>, cfg: &CrfConfig) -> Result<DenseMap> {
    crf_refine_observed(prob, image, cfg, |_, _| {})
}

/// Runs mean-field and calls `observe(iteration, marginals)` after each
/// iteration (1-based).
pub fn crf_refine_observed(
    prob: &DenseMap,
    image: CrfImage<'_>,
    cfg: &CrfConfig,
    mut observe: impl FnMut(usize, &DenseMap),
) -> Result<DenseMap> {
    cfg.validate()?;
    let (h, w) = (prob.height(), prob.width());
    let labels = prob.channels();
    if labels < 2 {
        return Err(Error::ShapeMismatch(format!(
            "crf needs at least 2 label channels, got {labels}"
        )));
    }
    if image.size() != (h, w) {
        let (ih, iw) = image.size();
        return Err(Error::ShapeMismatch(format!(
            "image is {ih}x{iw}, probabilities are {h}x{w}"
        )));
    }
    if let CrfImage::Rgb(m) = image {
        m.expect_channels("crf guidance image", 3)?;
    }
    prob.check_probability()?;
    for (i, px) in prob.data().chunks_exact(labels).enumerate() {
        let sum: f64 = px.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities at pixel {i} sum to {sum}, not 1"
            )));
        }
    }

    if cfg.w1 == 0.0 && cfg.w2 == 0.0 {
        // No pairwise term: the unary marginals are already the fixed point.
        for it in 1..=cfg.iterations {
            observe(it, prob);
        }
        return Ok(prob.clone());
    }

    let kernel = Kernel::new(image, cfg, w);
    let log_unary: Vec<f64> = prob.data().iter().map(|&p| (p as f64).ln()).collect();
    let mut q: Vec<f64> = prob.data().iter().map(|&p| p as f64).collect();
    let n = h * w;
    let mut out = prob.clone();
    for it in 1..=cfg.iterations {
        let rows = par::map_range(n, |i| {
            let mut msg = vec![0.0f64; labels];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let k = kernel.eval(i, j);
                let qj = &q[j * labels..(j + 1) * labels];
                for l in 0..labels {
                    msg[l] += k * qj[l];
                }
            }
            // Potts: the cost of label l is the mass on the other labels,
            // which equals -msg[l] up to a per-pixel constant.
            let logits: Vec<f64> = (0..labels)
                .map(|l| log_unary[i * labels + l] + msg[l])
                .collect();
            softmax(&logits)
        });
        q = rows.into_iter().flatten().collect();
        for (o, &v) in out.data_mut().iter_mut().zip(&q) {
            *o = v as f32;
        }
        observe(it, &out);
    }
    Ok(out)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Precomputed factors of the pairwise kernel.
struct Kernel<'a> {
    width: usize,
    w1: f64,
    w2: f64,
    /// `exp(-d^2 / 2 sa^2)` and `exp(-d^2 / 2 sg^2)` indexed by `dy^2 + dx^2`.
    spatial_alpha: Vec<f64>,
    spatial_gamma: Vec<f64>,
    appearance: Appearance<'a>,
    inv_two_sb2: f64,
}

enum Appearance<'a> {
    /// `exp(-d^2 / 2 sb^2)` indexed by the absolute gray difference.
    Gray(&'a [u8], Vec<f64>),
    Rgb(&'a [f32]),
}

impl<'a> Kernel<'a> {
    fn new(image: CrfImage<'a>, cfg: &CrfConfig, width: usize) -> Self {
        let (h, w) = image.size();
        let max_d2 = (h * h + w * w) as f64;
        let table = |sigma: f64| -> Vec<f64> {
            (0..=max_d2 as usize)
                .map(|d2| (-(d2 as f64) / (2.0 * sigma * sigma)).exp())
                .collect()
        };
        let inv_two_sb2 = 1.0 / (2.0 * cfg.sigma_beta * cfg.sigma_beta);
        let appearance = match image {
            CrfImage::Gray(g) => Appearance::Gray(
                g.intensity(),
                (0..256)
                    .map(|d| (-((d * d) as f64) * inv_two_sb2).exp())
                    .collect(),
            ),
            CrfImage::Rgb(m) => Appearance::Rgb(m.data()),
        };
        Self {
            width,
            w1: cfg.w1,
            w2: cfg.w2,
            spatial_alpha: table(cfg.sigma_alpha),
            spatial_gamma: table(cfg.sigma_gamma),
            appearance,
            inv_two_sb2,
        }
    }

    #[inline]
    fn eval(&self, i: usize, j: usize) -> f64 {
        let dy = (i / self.width).abs_diff(j / self.width);
        let dx = (i % self.width).abs_diff(j % self.width);
        let d2 = dy * dy + dx * dx;
        let color = match &self.appearance {
            Appearance::Gray(img, table) => table[img[i].abs_diff(img[j]) as usize],
            Appearance::Rgb(data) => {
                let mut s = 0.0;
                for c in 0..3 {
                    let d = 255.0 * (data[i * 3 + c] as f64 - data[j * 3 + c] as f64);
                    s += d * d;
                }
                (-s * self.inv_two_sb2).exp()
            }
        };
        self.w1 * self.spatial_alpha[d2] * color + self.w2 * self.spatial_gamma[d2]
    }
}
