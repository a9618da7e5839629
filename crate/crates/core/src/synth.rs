//! Synthetic scenes with mutually consistent ground truth.
//!
//! A scene is a list of filled disks and rectangles. The bundle carries the
//! rendered image, the saliency map (union of shapes), a boundary map (the
//! one-pixel ring just outside each shape), an offset field pointing every
//! shape pixel at its shape's centroid, the instance labels and the count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::centroid::SubitizingTarget;
use crate::error::{Error, Result};
use crate::maps::{DenseMap, GrayImage, InstanceLabelMap, OffsetField};

pub const BACKGROUND_INTENSITY: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Disk {
        radius: f64,
    },
    /// Pixels with `|y - cy| <= half_height` and `|x - cx| <= half_width`.
    Rectangle {
        half_height: f64,
        half_width: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    /// `(y, x)` in pixels.
    pub center: (f64, f64),
    /// Rendered intensity in `[0, 1]`.
    pub intensity: f64,
}

impl Shape {
    pub fn disk(center: (f64, f64), radius: f64, intensity: f64) -> Self {
        Self {
            kind: ShapeKind::Disk { radius },
            center,
            intensity,
        }
    }

    pub fn rectangle(
        center: (f64, f64),
        half_height: f64,
        half_width: f64,
        intensity: f64,
    ) -> Self {
        Self {
            kind: ShapeKind::Rectangle {
                half_height,
                half_width,
            },
            center,
            intensity,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.center.0;
        let dx = x as f64 - self.center.1;
        match self.kind {
            ShapeKind::Disk { radius } => dy * dy + dx * dx <= radius * radius,
            ShapeKind::Rectangle {
                half_height,
                half_width,
            } => dy.abs() <= half_height && dx.abs() <= half_width,
        }
    }

    /// Half extents `(dy, dx)` of the bounding box.
    fn extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Disk { radius } => (radius, radius),
            ShapeKind::Rectangle {
                half_height,
                half_width,
            } => (half_height, half_width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<Shape>,
    /// Seeds the image noise.
    pub seed: u64,
    /// Amplitude of uniform intensity noise added to the image.
    pub noise: f64,
    /// Largest tolerated fraction of a shape covered by earlier shapes.
    pub max_overlap: f64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, shapes: Vec<Shape>) -> Self {
        Self {
            height,
            width,
            shapes,
            seed: 0,
            noise: 0.0,
            max_overlap: 0.0,
        }
    }

    /// Between 1 and `max_shapes` disks and rectangles with more than three
    /// background pixels between any two bounding boxes.
    pub fn random(seed: u64, height: usize, width: usize, max_shapes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rng.gen_range(1..=max_shapes.max(1));
        let mut shapes: Vec<Shape> = Vec::new();
        let mut attempts = 0;
        while shapes.len() < target && attempts < 1000 {
            attempts += 1;
            let intensity = rng.gen_range(0.55..0.95);
            let shape = if rng.gen_bool(0.5) {
                let r = rng.gen_range(3..=7) as f64;
                Shape::disk((0.0, 0.0), r, intensity)
            } else {
                let hh = rng.gen_range(2..=6) as f64;
                let hw = rng.gen_range(2..=6) as f64;
                Shape::rectangle((0.0, 0.0), hh, hw, intensity)
            };
            let (ey, ex) = shape.extent();
            let (ey, ex) = (ey.ceil() as usize + 1, ex.ceil() as usize + 1);
            if 2 * ey >= height || 2 * ex >= width {
                continue;
            }
            let cy = rng.gen_range(ey..height - ey) as f64;
            let cx = rng.gen_range(ex..width - ex) as f64;
            let candidate = Shape {
                center: (cy, cx),
                ..shape
            };
            let clear = shapes.iter().all(|s| {
                let (sy, sx) = s.extent();
                let gap = 3.0;
                (s.center.0 - cy).abs() > sy + candidate.extent().0 + gap
                    || (s.center.1 - cx).abs() > sx + candidate.extent().1 + gap
            });
            if clear {
                shapes.push(candidate);
            }
        }
        Self {
            seed,
            ..Self::new(height, width, shapes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("scene must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) || !(self.noise >= 0.0) {
            return Err(Error::OutOfRange(
                "overlap ratio or noise out of range".into(),
            ));
        }
        for (k, s) in self.shapes.iter().enumerate() {
            let (ey, ex) = s.extent();
            if !(ey >= 0.0 && ex >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "shape {k} has negative size"
                )));
            }
            let (cy, cx) = s.center;
            if cy - ey < 0.0
                || cx - ex < 0.0
                || cy + ey > (self.height - 1) as f64
                || cx + ex > (self.width - 1) as f64
            {
                return Err(Error::OutOfRange(format!("shape {k} leaves the image")));
            }
            if !(0.0..=1.0).contains(&s.intensity) {
                return Err(Error::OutOfRange(format!(
                    "shape {k} intensity {} outside [0, 1]",
                    s.intensity
                )));
            }
        }
        Ok(())
    }
}

/// Everything [`generate`] produces for one scene.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    /// Three identical channels in `[0, 1]`.
    pub image: DenseMap,
    pub saliency: DenseMap,
    pub boundary: DenseMap,
    pub offsets: OffsetField,
    pub labels: InstanceLabelMap,
    pub count: SubitizingTarget,
    /// Centroid pixel of each instance, in label order.
    pub centroids: Vec<(usize, usize)>,
}

pub fn generate(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;

    // Later shapes paint over earlier ones.
    let mut owner = vec![0usize; n];
    let mut areas = vec![0usize; spec.shapes.len()];
    for (k, s) in spec.shapes.iter().enumerate() {
        let mut covered = 0usize;
        for i in 0..n {
            if s.contains(i / w, i % w) {
                areas[k] += 1;
                if owner[i] != 0 {
                    covered += 1;
                }
                owner[i] = k + 1;
            }
        }
        if areas[k] == 0 {
            return Err(Error::InvalidArgument(format!("shape {k} covers no pixel")));
        }
        if covered as f64 / areas[k] as f64 > spec.max_overlap {
            return Err(Error::InvalidArgument(format!(
                "shape {k} overlaps earlier shapes on {covered} of {} pixels",
                areas[k]
            )));
        }
    }
    for k in 0..spec.shapes.len() {
        if !owner.contains(&(k + 1)) {
            return Err(Error::InvalidArgument(format!(
                "shape {k} is completely covered by later shapes"
            )));
        }
    }

    let labels = InstanceLabelMap::new(h, w, owner.iter().map(|&o| o as u32).collect())?;
    let masks = labels.masks();
    let centroids: Vec<(usize, usize)> = masks
        .iter()
        .map(|mask| {
            let m = mask.len() as f64;
            let my = mask.iter().map(|&i| (i / w) as f64).sum::<f64>() / m;
            let mx = mask.iter().map(|&i| (i % w) as f64).sum::<f64>() / m;
            let (ry, rx) = (my.round() as usize, mx.round() as usize);
            if mask.binary_search(&(ry * w + rx)).is_ok() {
                (ry, rx)
            } else {
                // Non-convex remainder: nearest owned pixel.
                let best = mask
                    .iter()
                    .min_by(|&&a, &&b| {
                        let da = ((a / w) as f64 - my).powi(2) + ((a % w) as f64 - mx).powi(2);
                        let db = ((b / w) as f64 - my).powi(2) + ((b % w) as f64 - mx).powi(2);
                        da.total_cmp(&db)
                    })
                    .copied()
                    .expect("non-empty mask");
                (best / w, best % w)
            }
        })
        .collect();

    let vectors = (0..n)
        .map(|i| match owner[i] {
            0 => [0.0, 0.0],
            k => {
                let (cy, cx) = centroids[k - 1];
                [cy as f64 - (i / w) as f64, cx as f64 - (i % w) as f64]
            }
        })
        .collect();
    let offsets = OffsetField::new(h, w, vectors)?;

    let saliency = DenseMap::new(
        h,
        w,
        1,
        owner
            .iter()
            .map(|&o| if o > 0 { 1.0 } else { 0.0 })
            .collect(),
    )?;

    let mut boundary = vec![0.0f32; n];
    for i in 0..n {
        let (y, x) = (i / w, i % w);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if owner[j] != 0 && owner[j] != owner[i] && owner[i] == 0 {
                    boundary[i] = 1.0;
                }
            }
        }
    }
    let boundary = DenseMap::new(h, w, 1, boundary)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image = Vec::with_capacity(3 * n);
    for &o in &owner {
        let base = match o {
            0 => BACKGROUND_INTENSITY,
            k => spec.shapes[k - 1].intensity,
        };
        let jitter = if spec.noise > 0.0 {
            rng.gen_range(-spec.noise..=spec.noise)
        } else {
            0.0
        };
        let v = (base + jitter).clamp(0.0, 1.0) as f32;
        image.extend_from_slice(&[v, v, v]);
    }
    let image = DenseMap::new(h, w, 3, image)?;

    Ok(SceneBundle {
        image,
        saliency,
        boundary,
        offsets,
        count: SubitizingTarget(labels.count()),
        labels,
        centroids,
    })
}

/// Deterministic grayscale test image mixing two flat objects, a sinusoidal
/// texture and seeded noise, so that edge counts depend strongly on the
/// Canny thresholds.
pub fn textured_image(height: usize, width: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = [
        Shape::disk(
            (height as f64 * 0.35, width as f64 * 0.3),
            height.min(width) as f64 * 0.18,
            0.85,
        ),
        Shape::rectangle(
            (height as f64 * 0.65, width as f64 * 0.68),
            height as f64 * 0.14,
            width as f64 * 0.2,
            0.1,
        ),
    ];
    GrayImage::from_fn(height, width, |y, x| {
        let base = objects
            .iter()
            .rev()
            .find(|s| s.contains(y, x))
            .map_or(0.45, |s| s.intensity);
        let texture = 0.08 * ((x as f64 * 0.9).sin() * (y as f64 * 0.7).cos());
        let noise = rng.gen_range(-0.04..=0.04);
        (255.0 * (base + texture + noise)).round().clamp(0.0, 255.0) as u8
    })
}
