//! End-to-end instance assembly and its configuration.
//!
//! ```text
//! chase offsets -> centroids in the salient region -> nearest-centroid
//! assignment -> salient-fraction filter -> boundary random walk
//! -> restriction to the salient region
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::boundary::RandomWalkConfig;
use crate::boundary::{affinity, walk};
use crate::centroid::{
    self, assign_pixels, chase_offsets, extract_centroids_within, filter_salient, salient_mask,
    CentroidSet,
};
use crate::crf::CrfConfig;
use crate::error::{Error, Result};
use crate::eval::mean_saliency_scores;
use crate::maps::{DenseMap, InstanceLabelMap, OffsetField};

pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_SHAPE_MISMATCH: i32 = 3;
pub const EXIT_EMPTY_CENTROIDS: i32 = 4;

/// Process exit code for a failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ShapeMismatch(_) => EXIT_SHAPE_MISMATCH,
        Error::EmptyCentroids => EXIT_EMPTY_CENTROIDS,
        Error::Iteration { source, .. } => exit_code(source),
        _ => EXIT_BAD_INPUT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub theta: f64,
    pub eps: f64,
    pub max_iters: usize,
    pub radius: usize,
    pub chi: u32,
    pub steps: usize,
    pub crf: CrfConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            theta: centroid::DEFAULT_THETA,
            eps: centroid::DEFAULT_EPS,
            max_iters: centroid::DEFAULT_MAX_ITERS,
            radius: affinity::DEFAULT_RADIUS,
            chi: affinity::DEFAULT_CHI,
            steps: walk::DEFAULT_STEPS,
            crf: CrfConfig::default(),
            seed: 0,
        }
    }
}

/// Keys accepted by [`PipelineConfig::set`] and config files.
pub const CONFIG_KEYS: &[&str] = &[
    "theta",
    "eps",
    "max_iters",
    "radius",
    "chi",
    "steps",
    "seed",
    "crf.w1",
    "crf.w2",
    "crf.sigma_alpha",
    "crf.sigma_beta",
    "crf.sigma_gamma",
    "crf.iterations",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse {key}={value}")))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::OutOfRange(format!(
                "theta {} outside [0, 1]",
                self.theta
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::OutOfRange(format!("eps {} must be > 0", self.eps)));
        }
        if self.max_iters == 0 {
            return Err(Error::OutOfRange("max_iters must be >= 1".into()));
        }
        self.walk().validate()?;
        self.crf.validate()
    }

    pub fn walk(&self) -> RandomWalkConfig {
        RandomWalkConfig {
            steps: self.steps,
            chi: self.chi,
            radius: self.radius,
        }
    }

    /// Sets one field from its textual form. Does not validate ranges.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "theta" => self.theta = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "radius" => self.radius = parse(key, value)?,
            "chi" => self.chi = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "crf.w1" => self.crf.w1 = parse(key, value)?,
            "crf.w2" => self.crf.w2 = parse(key, value)?,
            "crf.sigma_alpha" => self.crf.sigma_alpha = parse(key, value)?,
            "crf.sigma_beta" => self.crf.sigma_beta = parse(key, value)?,
            "crf.sigma_gamma" => self.crf.sigma_gamma = parse(key, value)?,
            "crf.iterations" => self.crf.iterations = parse(key, value)?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {key:?}"
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines over `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("line {}: expected key=value", n + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order; validated at the end.
    pub fn resolve<'a>(
        file: Option<&str>,
        overrides: impl IntoIterator<Item = (&'a str, String)>,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        for (key, value) in overrides {
            cfg.set(key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for PipelineConfig {
    /// The `key=value` form read back by [`config_load`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "theta={}", self.theta)?;
        writeln!(f, "eps={}", self.eps)?;
        writeln!(f, "max_iters={}", self.max_iters)?;
        writeln!(f, "radius={}", self.radius)?;
        writeln!(f, "chi={}", self.chi)?;
        writeln!(f, "steps={}", self.steps)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "crf.w1={}", self.crf.w1)?;
        writeln!(f, "crf.w2={}", self.crf.w2)?;
        writeln!(f, "crf.sigma_alpha={}", self.crf.sigma_alpha)?;
        writeln!(f, "crf.sigma_beta={}", self.crf.sigma_beta)?;
        writeln!(f, "crf.sigma_gamma={}", self.crf.sigma_gamma)?;
        writeln!(f, "crf.iterations={}", self.crf.iterations)
    }
}

pub fn config_load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PipelineConfig::resolve(Some(&text), [])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembleOutcome {
    pub labels: InstanceLabelMap,
    pub centroids: CentroidSet,
    /// Offset-chasing iterations used and pixels still moving at the end.
    pub chase_iterations: usize,
    pub unsettled: usize,
    /// Mean saliency of each final instance.
    pub scores: Vec<f64>,
}

impl AssembleOutcome {
    /// Predicted instance count `T*`.
    pub fn count(&self) -> u32 {
        self.labels.count()
    }

    pub fn areas(&self) -> Vec<usize> {
        self.labels.areas()
    }

    /// Text summary: `count`, then one `id area score` line per instance.
    pub fn summary(&self) -> String {
        let mut out = format!("count {}\n", self.count());
        for (k, (area, score)) in self.areas().iter().zip(&self.scores).enumerate() {
            out.push_str(&format!("{} {} {:.6}\n", k + 1, area, score));
        }
        out
    }
}

/// Salient instance labels from a saliency map `S`, boundary map `B` and
/// offset field `V`.
///
/// Centroids are only taken from salient pixels, and a pixel keeps its
/// nearest-centroid label only if its chased position lands in the salient
/// region. The random walk redistributes salient pixels among instances;
/// non-salient pixels end as background. An empty salient region yields
/// zero instances; a salient region without any centroid is
/// [`Error::EmptyCentroids`].
pub fn assemble(
    saliency: &DenseMap,
    boundary: &DenseMap,
    offsets: &OffsetField,
    cfg: &PipelineConfig,
) -> Result<AssembleOutcome> {
    cfg.validate()?;
    let (h, w) = (offsets.height(), offsets.width());
    saliency.expect_channels("saliency map", 1)?;
    saliency.expect_size("saliency map", h, w)?;
    boundary.expect_channels("boundary map", 1)?;
    boundary.expect_size("boundary map", h, w)?;
    saliency.check_probability()?;
    boundary.check_probability()?;

    let chase = chase_offsets(offsets, cfg.max_iters, cfg.eps);
    let chase_iterations = chase.iterations;
    let unsettled = chase.unsettled_count();
    let salient = salient_mask(saliency);
    let empty = |centroids| AssembleOutcome {
        labels: InstanceLabelMap::background(h, w),
        centroids,
        chase_iterations,
        unsettled,
        scores: Vec::new(),
    };
    if !salient.iter().any(|&s| s) {
        return Ok(empty(CentroidSet::default()));
    }
    let centroids = extract_centroids_within(&chase.field, cfg.eps, Some(&salient));
    if centroids.is_empty() {
        return Err(Error::EmptyCentroids);
    }
    let assigned = assign_pixels(&chase.field, &centroids)?;
    let gated = assigned
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| if salient[chase.field.target(i)] { l } else { 0 })
        .collect();
    let gated = InstanceLabelMap::compact(h, w, gated)?;
    let filtered = filter_salient(&gated, saliency, cfg.theta)?;
    if filtered.count() == 0 {
        return Ok(empty(centroids));
    }
    let walked = walk::random_walk(&filtered, boundary, saliency, &cfg.walk())?;
    let labels = walked
        .labels()
        .iter()
        .zip(&salient)
        .map(|(&l, &s)| if s { l } else { 0 })
        .collect();
    let labels = InstanceLabelMap::compact(h, w, labels)?;
    let scores = mean_saliency_scores(&labels, saliency)?;
    Ok(AssembleOutcome {
        labels,
        centroids,
        chase_iterations,
        unsettled,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneSpec, Shape};

    #[test]
    fn config_defaults_and_precedence() {
        assert_eq!(
            PipelineConfig::resolve(Some(""), []).unwrap(),
            PipelineConfig::default()
        );
        let cfg = PipelineConfig::resolve(
            Some("theta=0.2\n# note\n\nsteps = 8\n"),
            [("theta", "0.5".into())],
        )
        .unwrap();
        assert_eq!(cfg.theta, 0.5);
        assert_eq!(cfg.steps, 8);
    }

    #[test]
    fn config_rejections() {
        assert!(matches!(
            PipelineConfig::resolve(Some("chi=0"), []),
            Err(Error::OutOfRange(_))
        ));
        assert!(PipelineConfig::resolve(Some("gamma=1"), []).is_err());
        assert!(PipelineConfig::resolve(Some("theta"), []).is_err());
        assert!(PipelineConfig::resolve(Some("theta=abc"), []).is_err());
        assert!(PipelineConfig::resolve(Some("crf.iterations=0"), []).is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.theta = 0.3;
        cfg.crf.w1 = 2.5;
        cfg.seed = 77;
        assert_eq!(
            PipelineConfig::resolve(Some(&cfg.to_string()), []).unwrap(),
            cfg
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::ShapeMismatch("x".into())), 3);
        assert_eq!(exit_code(&Error::EmptyCentroids), 4);
        assert_eq!(exit_code(&Error::OutOfRange("x".into())), 2);
        let nested = Error::Iteration {
            iteration: 2,
            source: Box::new(Error::EmptyCentroids),
        };
        assert_eq!(exit_code(&nested), 4);
    }

    #[test]
    fn two_rectangles_recovered() {
        let spec = SceneSpec::new(
            20,
            24,
            vec![
                Shape::rectangle((5.0, 6.0), 3.0, 4.0, 0.8),
                Shape::rectangle((13.0, 17.0), 4.0, 4.0, 0.7),
            ],
        );
        let bundle = generate(&spec).unwrap();
        let out = assemble(
            &bundle.saliency,
            &bundle.boundary,
            &bundle.offsets,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(out.count(), 2);
        assert_eq!(out.labels, bundle.labels);
        assert!(out.scores.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn zero_saliency_yields_nothing() {
        let s = DenseMap::zeros(6, 6, 1);
        let out = assemble(
            &s,
            &s,
            &OffsetField::zeros(6, 6),
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(out.count(), 0);
        assert!(out.summary().starts_with("count 0\n"));
    }

    #[test]
    fn salient_region_without_centroid() {
        let s = DenseMap::filled(1, 4, 1, 1.0);
        let b = DenseMap::zeros(1, 4, 1);
        // Every pixel bounces between neighbors and never settles.
        let v =
            OffsetField::new(1, 4, vec![[0.0, 1.0], [0.0, -1.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        assert!(matches!(
            assemble(&s, &b, &v, &PipelineConfig::default()),
            Err(Error::EmptyCentroids)
        ));
    }

    #[test]
    fn size_mismatch() {
        let s = DenseMap::zeros(6, 6, 1);
        let b = DenseMap::zeros(6, 5, 1);
        let err = assemble(
            &s,
            &b,
            &OffsetField::zeros(6, 6),
            &PipelineConfig::default(),
        )
        .unwrap_err();
        assert_eq!(exit_code(&err), 3);
    }
}
