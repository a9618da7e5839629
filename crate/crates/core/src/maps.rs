//! Grid types shared by every stage.
//!
//! Coordinates are `(row y, col x)` with the origin at the top-left pixel.
//! Pixel `(y, x)` has linear index `y * width + x`; multi-channel data is
//! stored row-major with the channel index varying fastest.

use crate::error::{Error, Result};

/// Slack allowed when checking that probability maps lie in `[0, 1]`.
pub const PROBABILITY_SLACK: f64 = 1e-9;

/// Dense `height x width x channels` grid of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl DenseMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidArgument("map dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} map needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a map that must hold probabilities (saliency, boundary, CRF
    /// marginals). Rejects any value outside `[0, 1]` by more than
    /// [`PROBABILITY_SLACK`].
    pub fn probability(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let map = Self::new(height, width, channels, data)?;
        map.check_probability()?;
        Ok(map)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn check_probability(&self) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| !(-PROBABILITY_SLACK..=1.0 + PROBABILITY_SLACK).contains(&(v as f64)))
        {
            Some(i) => Err(Error::OutOfRange(format!(
                "probability map value {} at flat index {i} is outside [0, 1]",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Values of one pixel across channels.
    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Copies one channel out as a single-channel map.
    pub fn channel(&self, c: usize) -> Result<DenseMap> {
        if c >= self.channels {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range for {}-channel map",
                self.channels
            )));
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        DenseMap::new(self.height, self.width, 1, data)
    }

    pub fn same_size(&self, other_h: usize, other_w: usize) -> bool {
        self.height == other_h && self.width == other_w
    }

    pub(crate) fn expect_size(&self, what: &str, height: usize, width: usize) -> Result<()> {
        if self.same_size(height, width) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what} is {}x{}, expected {height}x{width}",
                self.height, self.width
            )))
        }
    }

    pub(crate) fn expect_channels(&self, what: &str, channels: usize) -> Result<()> {
        if self.channels == channels {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what} has {} channels, expected {channels}",
                self.channels
            )))
        }
    }
}

/// Per-pixel offset vectors `(dy, dx)` in pixel units.
///
/// Construction clamps every vector so that `p + v` stays inside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    height: usize,
    width: usize,
    vectors: Vec<[f64; 2]>,
}

impl OffsetField {
    pub fn new(height: usize, width: usize, mut vectors: Vec<[f64; 2]>) -> Result<Self> {
        if vectors.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} offset field needs {} vectors, got {}",
                height * width,
                vectors.len()
            )));
        }
        if let Some(i) = vectors
            .iter()
            .position(|v| !(v[0].is_finite() && v[1].is_finite()))
        {
            return Err(Error::OutOfRange(format!(
                "offset at flat index {i} is not finite"
            )));
        }
        for (i, v) in vectors.iter_mut().enumerate() {
            *v = clamp_offset(i / width, i % width, *v, height, width);
        }
        Ok(Self {
            height,
            width,
            vectors,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vectors: vec![[0.0; 2]; height * width],
        }
    }

    /// Reads a two-channel map as `(dy, dx)` pairs.
    pub fn from_dense(map: &DenseMap) -> Result<Self> {
        map.expect_channels("offset map", 2)?;
        let vectors = map
            .data()
            .chunks_exact(2)
            .map(|v| [v[0] as f64, v[1] as f64])
            .collect();
        Self::new(map.height(), map.width(), vectors)
    }

    pub fn to_dense(&self) -> DenseMap {
        let data = self
            .vectors
            .iter()
            .flat_map(|v| [v[0] as f32, v[1] as f32])
            .collect();
        DenseMap {
            height: self.height,
            width: self.width,
            channels: 2,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    #[inline]
    pub fn get(&self, index: usize) -> [f64; 2] {
        self.vectors[index]
    }

    /// Pixel that `p_i + v_i` points to, rounded to the nearest pixel and
    /// clamped to the image.
    #[inline]
    pub fn target(&self, index: usize) -> usize {
        let v = self.vectors[index];
        let y = index / self.width;
        let x = index % self.width;
        round_to_pixel(y as f64 + v[0], x as f64 + v[1], self.height, self.width)
    }
}

#[inline]
pub(crate) fn round_to_pixel(y: f64, x: f64, height: usize, width: usize) -> usize {
    let ty = y.round().clamp(0.0, (height - 1) as f64) as usize;
    let tx = x.round().clamp(0.0, (width - 1) as f64) as usize;
    ty * width + tx
}

#[inline]
pub(crate) fn clamp_offset(
    y: usize,
    x: usize,
    v: [f64; 2],
    height: usize,
    width: usize,
) -> [f64; 2] {
    let ty = (y as f64 + v[0]).clamp(0.0, (height - 1) as f64);
    let tx = (x as f64 + v[1]).clamp(0.0, (width - 1) as f64);
    [ty - y as f64, tx - x as f64]
}

/// Integer instance labels; `0` is background and `1..=count` are
/// instances, each present at least once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    count: u32,
}

impl InstanceLabelMap {
    /// Validates that the ids form a contiguous range.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} label map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let count = labels.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; count as usize + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().skip(1).position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "instance id {} is missing from a map with max id {count}",
                missing + 1
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            count,
        })
    }

    /// Relabels arbitrary ids to `1..=count` in order of first appearance of
    /// increasing original id; `0` stays background.
    pub fn compact(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} label map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let mut ids: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let remap = |l: u32| -> u32 {
            if l == 0 {
                0
            } else {
                ids.binary_search(&l).map(|p| p as u32 + 1).unwrap_or(0)
            }
        };
        let labels: Vec<u32> = labels.iter().map(|&l| remap(l)).collect();
        let count = ids.len() as u32;
        Ok(Self {
            height,
            width,
            labels,
            count,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
            count: 0,
        }
    }

    /// Reads a single-channel map of integer-valued floats.
    pub fn from_dense(map: &DenseMap) -> Result<Self> {
        map.expect_channels("label map", 1)?;
        let labels = map
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(Error::OutOfRange(format!(
                        "label {v} at flat index {i} is not a non-negative integer"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(map.height(), map.width(), labels)
    }

    pub fn to_dense(&self) -> DenseMap {
        DenseMap {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Number of instances (`T*`).
    pub fn count(&self) -> u32 {
        self.count
    }

    /// Pixel count per instance, indexed `0..count` for ids `1..=count`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.count as usize];
        for &l in &self.labels {
            if l > 0 {
                areas[l as usize - 1] += 1;
            }
        }
        areas
    }

    /// Sorted pixel indices of each instance.
    pub fn masks(&self) -> Vec<Vec<usize>> {
        let mut masks = vec![Vec::new(); self.count as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                masks[l as usize - 1].push(i);
            }
        }
        masks
    }
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    intensity: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, intensity: Vec<u8>) -> Result<Self> {
        if intensity.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                intensity.len()
            )));
        }
        Ok(Self {
            height,
            width,
            intensity,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut intensity = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                intensity.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            intensity,
        }
    }

    /// Single-channel map with values in `[0, 1]` converted to intensities
    /// by `round(255 v)`.
    pub fn from_unit_map(map: &DenseMap) -> Result<Self> {
        map.expect_channels("grayscale map", 1)?;
        map.check_probability()?;
        let intensity = map
            .data()
            .iter()
            .map(|&v| (255.0 * v as f64).round().clamp(0.0, 255.0) as u8)
            .collect();
        Self::new(map.height(), map.width(), intensity)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn intensity(&self) -> &[u8] {
        &self.intensity
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.intensity[y * self.width + x]
    }

    pub fn to_unit_map(&self) -> DenseMap {
        DenseMap {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.intensity.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }
}

/// BT.601 luma: `round(255 (0.299 R + 0.587 G + 0.114 B))`.
pub fn to_gray(map: &DenseMap) -> Result<GrayImage> {
    map.expect_channels("color image", 3)?;
    map.check_probability()?;
    let intensity = map
        .data()
        .chunks_exact(3)
        .map(|px| {
            let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            (255.0 * luma).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(map.height(), map.width(), intensity)
}
