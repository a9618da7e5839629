//! Random-walk propagation of instance saliency.
//!
//! Each instance `n` is seeded with `1[label = n] * S * (1 - B)` and
//! diffused `steps` times through `M = D^-1 H^chi`. Every pixel then takes
//! the instance with the largest propagated value, or background when no
//! instance exceeds [`LABEL_FLOOR`].

use crate::boundary::affinity::{build_affinity, AffinityOperator, DEFAULT_CHI, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::maps::{DenseMap, InstanceLabelMap};

pub const DEFAULT_STEPS: usize = 16;
pub const LABEL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomWalkConfig {
    /// Power of `M` applied to the seeds.
    pub steps: usize,
    pub chi: u32,
    pub radius: usize,
}

impl Default for RandomWalkConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            chi: DEFAULT_CHI,
            radius: DEFAULT_RADIUS,
        }
    }
}

impl RandomWalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::OutOfRange("random walk steps must be >= 1".into()));
        }
        if self.chi == 0 {
            return Err(Error::OutOfRange("chi must be >= 1".into()));
        }
        if self.radius == 0 {
            return Err(Error::OutOfRange("radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seed vector of every instance, indexed `0..count`.
pub fn instance_seeds(
    instances: &InstanceLabelMap,
    boundary: &DenseMap,
    saliency: &DenseMap,
) -> Vec<Vec<f64>> {
    let n = instances.count() as usize;
    let mut seeds = vec![vec![0.0; instances.labels().len()]; n];
    for (i, &l) in instances.labels().iter().enumerate() {
        if l > 0 {
            let s = saliency.data()[i] as f64;
            let b = boundary.data()[i] as f64;
            seeds[l as usize - 1][i] = s * (1.0 - b);
        }
    }
    seeds
}

/// Propagated map of every instance.
pub fn propagate_instances(
    operator: &AffinityOperator,
    seeds: &[Vec<f64>],
    steps: usize,
) -> Vec<Vec<f64>> {
    seeds.iter().map(|s| operator.propagate(s, steps)).collect()
}

/// Per-pixel argmax over instances with a floor; ties go to the lower id.
pub fn assign_by_argmax(
    height: usize,
    width: usize,
    propagated: &[Vec<f64>],
) -> Result<InstanceLabelMap> {
    let labels = (0..height * width)
        .map(|i| {
            let mut best = 0u32;
            let mut best_v = LABEL_FLOOR;
            for (n, p) in propagated.iter().enumerate() {
                if p[i] > best_v {
                    best_v = p[i];
                    best = n as u32 + 1;
                }
            }
            best
        })
        .collect();
    // Instances that lose every pixel disappear; ids are compacted.
    InstanceLabelMap::compact(height, width, labels)
}

pub fn random_walk(
    instances: &InstanceLabelMap,
    boundary: &DenseMap,
    saliency: &DenseMap,
    cfg: &RandomWalkConfig,
) -> Result<InstanceLabelMap> {
    cfg.validate()?;
    let (h, w) = (instances.height(), instances.width());
    boundary.expect_channels("boundary map", 1)?;
    boundary.expect_size("boundary map", h, w)?;
    saliency.expect_channels("saliency map", 1)?;
    saliency.expect_size("saliency map", h, w)?;
    saliency.check_probability()?;
    if instances.count() == 0 {
        return Err(Error::EmptyInstances);
    }
    let operator = build_affinity(boundary, cfg.radius, cfg.chi)?;
    let seeds = instance_seeds(instances, boundary, saliency);
    let propagated = propagate_instances(&operator, &seeds, cfg.steps);
    assign_by_argmax(h, w, &propagated)
}
