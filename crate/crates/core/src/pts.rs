//! Progressive training: alternate training on pseudo labels with label
//! regeneration through the CRF, refreshing weights by an exponential
//! moving average from the third iteration on.
//!
//! ```text
//! for r in 1..=R
//!     w_r = train(w, rho_r, E)
//!     if r > refresh_from: w_r = a(r) w_{r-1} + (1 - a(r)) w_r
//!     rho_{r+1} = crf(predict(w_r))
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::crf::{crf_refine, unary_from_saliency, CrfConfig, CrfImage};
use crate::error::{Error, Result};
use crate::maps::{DenseMap, GrayImage};

pub const DEFAULT_ITERATIONS: usize = 6;
pub const DEFAULT_EPOCHS: usize = 8;
pub const DEFAULT_REFRESH_FROM: usize = 2;

/// Flat model weights tagged with the iteration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    iteration: usize,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, iteration: usize) -> Result<Self> {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {k} is not finite"
            )));
        }
        Ok(Self { values, iteration })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_iteration(mut self, iteration: usize) -> Self {
        self.iteration = iteration;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaRule {
    /// `r / (r + 1)`.
    Progressive,
    Constant(f64),
}

impl AlphaRule {
    pub fn alpha(&self, r: usize) -> f64 {
        match *self {
            AlphaRule::Progressive => r as f64 / (r as f64 + 1.0),
            AlphaRule::Constant(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtsConfig {
    pub iterations: usize,
    pub epochs: usize,
    pub alpha_rule: AlphaRule,
    pub refresh_from: usize,
}

impl Default for PtsConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            epochs: DEFAULT_EPOCHS,
            alpha_rule: AlphaRule::Progressive,
            refresh_from: DEFAULT_REFRESH_FROM,
        }
    }
}

impl PtsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.epochs == 0 {
            return Err(Error::OutOfRange(
                "iterations and epochs must be >= 1".into(),
            ));
        }
        if let AlphaRule::Constant(a) = self.alpha_rule {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::OutOfRange(format!("alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The model being trained. Labels and predictions are single-channel
/// foreground probability maps, one per training image.
pub trait Trainer {
    fn train(
        &mut self,
        params: &ParamVector,
        labels: &[DenseMap],
        epochs: usize,
    ) -> Result<ParamVector>;

    fn predict(&self, params: &ParamVector) -> Result<Vec<DenseMap>>;

    /// Training objective of `params` against `labels`.
    fn loss(&self, params: &ParamVector, labels: &[DenseMap]) -> Result<f64>;
}

/// `alpha * prev + (1 - alpha) * curr`; exact copies at `alpha` 0 and 1.
pub fn ema_refresh(prev: &ParamVector, curr: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if prev.len() != curr.len() {
        return Err(Error::ShapeMismatch(format!(
            "parameter vectors have lengths {} and {}",
            prev.len(),
            curr.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange(format!("alpha {alpha} outside [0, 1]")));
    }
    let values = if alpha == 0.0 {
        curr.values.clone()
    } else if alpha == 1.0 {
        prev.values.clone()
    } else {
        prev.values
            .iter()
            .zip(&curr.values)
            .map(|(&p, &c)| (alpha * p + (1.0 - alpha) * c).clamp(p.min(c), p.max(c)))
            .collect()
    };
    ParamVector::new(values, curr.iteration)
}

/// SHA-256 over the label maps' shapes and `f32` bit patterns, hex encoded.
pub fn label_set_hash(labels: &[DenseMap]) -> String {
    let mut hasher = Sha256::new();
    for map in labels {
        for dim in [map.height(), map.width(), map.channels()] {
            hasher.update((dim as u64).to_le_bytes());
        }
        for v in map.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `None` when no refresh was applied.
    pub alpha: Option<f64>,
    /// Loss of the iteration's final weights on the labels it trained on.
    pub loss: f64,
    /// Hash of the labels the iteration trained on.
    pub label_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtsOutcome {
    pub params: ParamVector,
    pub trail: Vec<IterationRecord>,
    /// Final weights of every iteration, in order.
    pub snapshots: Vec<ParamVector>,
}

/// Regenerates labels: CRF over `[1 - p, p]`, foreground channel kept.
pub fn regenerate_labels(
    predictions: &[DenseMap],
    images: &[GrayImage],
    crf: &CrfConfig,
) -> Result<Vec<DenseMap>> {
    if predictions.len() != images.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} images",
            predictions.len(),
            images.len()
        )));
    }
    predictions
        .iter()
        .zip(images)
        .map(|(p, img)| {
            let refined = crf_refine(&unary_from_saliency(p)?, CrfImage::Gray(img), crf)?;
            refined.channel(1)
        })
        .collect()
}

pub fn run_pts<T: Trainer>(
    init_labels: Vec<DenseMap>,
    images: &[GrayImage],
    init_params: ParamVector,
    trainer: &mut T,
    crf: &CrfConfig,
    cfg: &PtsConfig,
) -> Result<PtsOutcome> {
    cfg.validate()?;
    crf.validate()?;
    let mut labels = init_labels;
    let mut current = init_params;
    let mut trail = Vec::with_capacity(cfg.iterations);
    let mut snapshots: Vec<ParamVector> = Vec::with_capacity(cfg.iterations);
    for r in 1..=cfg.iterations {
        let tag = |source: Error| Error::Iteration {
            iteration: r,
            source: Box::new(source),
        };
        let trained = trainer.train(&current, &labels, cfg.epochs).map_err(tag)?;
        let mut alpha = None;
        let next = match snapshots.last() {
            Some(prev) if r > cfg.refresh_from => {
                let a = cfg.alpha_rule.alpha(r);
                alpha = Some(a);
                ema_refresh(prev, &trained, a).map_err(tag)?
            }
            _ => trained,
        }
        .with_iteration(r);
        let loss = trainer.loss(&next, &labels).map_err(tag)?;
        trail.push(IterationRecord {
            iteration: r,
            alpha,
            loss,
            label_hash: label_set_hash(&labels),
        });
        if r < cfg.iterations {
            let predictions = trainer.predict(&next).map_err(tag)?;
            labels = regenerate_labels(&predictions, images, crf).map_err(tag)?;
        }
        snapshots.push(next.clone());
        current = next;
    }
    Ok(PtsOutcome {
        params: current,
        trail,
        snapshots,
    })
}

/// Two-class scene for exercising the loop without a network.
///
/// The guidance image is a clean rendering of a bright disk. The trainer
/// never sees it; its input is the same rendering under per-pixel noise.
/// The initial labels miss 30% of the foreground, which biases the first
/// fit toward under-segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub image: GrayImage,
    /// Trainer input, values in `[0, 1]`.
    pub features: DenseMap,
    pub clean: Vec<bool>,
    /// Initial pseudo labels: the clean mask with random foreground misses
    /// and a few false alarms.
    pub noisy: DenseMap,
}

pub const TOY_SIZE: usize = 24;

impl ToyScene {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = TOY_SIZE;
        let c = (n as f64 - 1.0) / 2.0;
        let radius = n as f64 * 0.36;
        let mut clean = Vec::with_capacity(n * n);
        let mut rendered = Vec::with_capacity(n * n);
        let mut features = Vec::with_capacity(n * n);
        let mut noisy = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let fg = (y as f64 - c).hypot(x as f64 - c) <= radius;
                let level = if fg { 0.7 } else { 0.3 };
                let v: f64 = level + rng.gen_range(-0.2..0.2);
                let flip: f64 = rng.gen();
                let label = if fg { flip >= 0.3 } else { flip < 0.05 };
                clean.push(fg);
                rendered.push(level as f32);
                features.push(v.clamp(0.0, 1.0) as f32);
                noisy.push(if label { 1.0f32 } else { 0.0 });
            }
        }
        let rendered = DenseMap::new(n, n, 1, rendered).expect("sized");
        Self {
            image: GrayImage::from_unit_map(&rendered).expect("unit range"),
            features: DenseMap::new(n, n, 1, features).expect("sized"),
            clean,
            noisy: DenseMap::new(n, n, 1, noisy).expect("sized"),
        }
    }

    /// Fraction of pixels where `prediction >= 0.5` agrees with the clean mask.
    pub fn accuracy(&self, prediction: &DenseMap) -> f64 {
        let hits = prediction
            .data()
            .iter()
            .zip(&self.clean)
            .filter(|(&p, &c)| (p >= 0.5) == c)
            .count();
        hits as f64 / self.clean.len() as f64
    }
}

/// Per-pixel logistic regression on intensity, weights `[w, b]`, trained by
/// full-batch gradient descent on soft-label cross-entropy (one step per
/// epoch).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainer {
    pub features: Vec<DenseMap>,
    pub learning_rate: f64,
}

pub const TOY_LEARNING_RATE: f64 = 2.0;

impl ToyTrainer {
    pub fn new(features: Vec<DenseMap>) -> Self {
        Self {
            features,
            learning_rate: TOY_LEARNING_RATE,
        }
    }

    pub fn initial_params() -> ParamVector {
        ParamVector::new(vec![0.0, 0.0], 0).expect("finite")
    }

    fn check(&self, params: &ParamVector, labels: Option<&[DenseMap]>) -> Result<()> {
        if params.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "toy trainer takes 2 parameters, got {}",
                params.len()
            )));
        }
        if let Some(labels) = labels {
            if labels.len() != self.features.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} label maps for {} images",
                    labels.len(),
                    self.features.len()
                )));
            }
            for (l, f) in labels.iter().zip(&self.features) {
                l.expect_size("label map", f.height(), f.width())?;
            }
        }
        Ok(())
    }

    fn samples<'a>(&'a self, labels: &'a [DenseMap]) -> impl Iterator<Item = (f64, f64)> + 'a {
        self.features
            .iter()
            .zip(labels)
            .flat_map(|(f, l)| f.data().iter().zip(l.data()))
            .map(|(&x, &y)| (feature(x), y as f64))
    }
}

/// Centered, rescaled intensity.
fn feature(x: f32) -> f64 {
    (x as f64 - 0.5) * 10.0
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Trainer for ToyTrainer {
    fn train(
        &mut self,
        params: &ParamVector,
        labels: &[DenseMap],
        epochs: usize,
    ) -> Result<ParamVector> {
        self.check(params, Some(labels))?;
        let count = self.samples(labels).count().max(1) as f64;
        let (mut w, mut b) = (params.values()[0], params.values()[1]);
        for _ in 0..epochs {
            let (mut gw, mut gb) = (0.0, 0.0);
            for (x, y) in self.samples(labels) {
                let err = logistic(w * x + b) - y;
                gw += err * x;
                gb += err;
            }
            w -= self.learning_rate * gw / count;
            b -= self.learning_rate * gb / count;
        }
        ParamVector::new(vec![w, b], params.iteration())
    }

    fn predict(&self, params: &ParamVector) -> Result<Vec<DenseMap>> {
        self.check(params, None)?;
        let (w, b) = (params.values()[0], params.values()[1]);
        self.features
            .iter()
            .map(|f| {
                let data = f
                    .data()
                    .iter()
                    .map(|&x| logistic(w * feature(x) + b) as f32)
                    .collect();
                DenseMap::new(f.height(), f.width(), 1, data)
            })
            .collect()
    }

    fn loss(&self, params: &ParamVector, labels: &[DenseMap]) -> Result<f64> {
        self.check(params, Some(labels))?;
        let (w, b) = (params.values()[0], params.values()[1]);
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, y) in self.samples(labels) {
            let p = logistic(w * x + b).clamp(1e-12, 1.0 - 1e-12);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            count += 1;
        }
        Ok(total / count.max(1) as f64)
    }
}
