//! Boundary affinity between nearby pixels and the random-walk transition
//! operator built from it.
//!
//! For pixels `i`, `j` within `radius`, `h_ij = 1 - max B(x_k)` over the
//! pixels `x_k` of the Bresenham line between them (endpoints included).
//! The transition matrix is `M = D^-1 H^chi` with `H^chi` the elementwise
//! power on the sparse pattern and `D_ii = sum_j (H^chi)_ij`.

use crate::error::{Error, Result};
use crate::maps::DenseMap;
use crate::par;

pub const DEFAULT_RADIUS: usize = 5;
pub const DEFAULT_CHI: u32 = 4;
/// Default cap on the operator's memory footprint.
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 30;

/// Bytes stored per sparse entry: column index, `h` and `h^chi`.
const BYTES_PER_ENTRY: u64 = 4 + 8 + 8;

/// Pixels on the Bresenham line from `a` to `b`, both included.
pub fn bresenham(a: (usize, usize), b: (usize, usize)) -> Vec<(usize, usize)> {
    let (mut y, mut x) = (a.0 as isize, a.1 as isize);
    let (y1, x1) = (b.0 as isize, b.1 as isize);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((y as usize, x as usize));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// `h_ij` for two pixels given by linear index. The line is always
/// rasterized from the lower index so that `h_ij == h_ji`.
pub fn pair_affinity(boundary: &[f32], width: usize, i: usize, j: usize) -> f64 {
    let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
    let max = bresenham((lo / width, lo % width), (hi / width, hi % width))
        .into_iter()
        .map(|(y, x)| boundary[y * width + x] as f64)
        .fold(0.0f64, f64::max);
    1.0 - max
}

/// Offsets `(dy, dx)` with `dy^2 + dx^2 <= radius^2`, in raster order.
pub fn neighborhood(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Sparse symmetric affinity `H` (CSR), its elementwise power and the row
/// degrees. Rows are sorted by column, which fixes the summation order.
#[derive(Debug, Clone)]
pub struct AffinityOperator {
    height: usize,
    width: usize,
    radius: usize,
    chi: u32,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    affinity: Vec<f64>,
    weights: Vec<f64>,
    degree: Vec<f64>,
}

impl AffinityOperator {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn chi(&self) -> u32 {
        self.chi
    }

    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `D_ii`, the row sums of the transition weights.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// Row `i` as `(column, h_ij, transition weight)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.affinity[span.clone()])
            .zip(&self.weights[span])
            .map(|((&c, &a), &wt)| (c as usize, a, wt))
    }

    /// `h_ij` if `j` lies in `i`'s neighborhood.
    pub fn affinity(&self, i: usize, j: usize) -> Option<f64> {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .binary_search(&(j as u32))
            .ok()
            .map(|k| self.affinity[span.start + k])
    }

    /// Row `i` of `M = D^-1 H^chi` as `(column, probability)`.
    pub fn transition_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let d = self.degree[i];
        self.row(i).map(move |(c, _, wt)| (c, wt / d))
    }

    /// One step `v <- M v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.len(), "vector length must match pixel count");
        par::map_range(self.len(), |i| {
            let span = self.row_ptr[i]..self.row_ptr[i + 1];
            let mut acc = 0.0;
            for (&c, &wt) in self.cols[span.clone()].iter().zip(&self.weights[span]) {
                acc += wt * v[c as usize];
            }
            acc / self.degree[i]
        })
    }

    /// `M^steps v`.
    pub fn propagate(&self, seed: &[f64], steps: usize) -> Vec<f64> {
        let mut v = seed.to_vec();
        for _ in 0..steps {
            v = self.apply(&v);
        }
        v
    }
}

pub fn build_affinity(boundary: &DenseMap, radius: usize, chi: u32) -> Result<AffinityOperator> {
    build_affinity_with_budget(boundary, radius, chi, DEFAULT_MEMORY_BUDGET)
}

/// Builds the operator, failing if its storage would exceed `budget` bytes.
///
/// A pixel with `B = 1` has zero affinity to everything, itself included;
/// its row gets a unit self-loop so that `D_ii > 0` and its mass stays put.
pub fn build_affinity_with_budget(
    boundary: &DenseMap,
    radius: usize,
    chi: u32,
    budget: u64,
) -> Result<AffinityOperator> {
    boundary.expect_channels("boundary map", 1)?;
    boundary.check_probability()?;
    if radius == 0 {
        return Err(Error::OutOfRange(
            "affinity radius must be at least 1".into(),
        ));
    }
    if chi == 0 {
        return Err(Error::OutOfRange("chi must be a positive integer".into()));
    }
    let (h, w) = (boundary.height(), boundary.width());
    let offsets = neighborhood(radius);
    let needed = (offsets.len() as u64)
        .saturating_mul((h * w) as u64)
        .saturating_mul(BYTES_PER_ENTRY);
    if needed > budget {
        return Err(Error::MemoryBudget { needed, budget });
    }
    let b = boundary.data();
    let rows = par::map_range(h * w, |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let mut cols = Vec::with_capacity(offsets.len());
        let mut aff = Vec::with_capacity(offsets.len());
        for &(dy, dx) in &offsets {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            cols.push(j as u32);
            aff.push(pair_affinity(b, w, i, j).clamp(0.0, 1.0));
        }
        let mut weights: Vec<f64> = aff.iter().map(|a| a.powi(chi as i32)).collect();
        let mut degree: f64 = weights.iter().sum();
        if degree <= 0.0 {
            let self_pos = cols
                .iter()
                .position(|&c| c as usize == i)
                .expect("self in row");
            weights[self_pos] = 1.0;
            degree = 1.0;
        }
        (cols, aff, weights, degree)
    });

    let mut row_ptr = Vec::with_capacity(h * w + 1);
    row_ptr.push(0);
    let total: usize = rows.iter().map(|r| r.0.len()).sum();
    let mut cols = Vec::with_capacity(total);
    let mut affinity = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut degree = Vec::with_capacity(h * w);
    for (c, a, wt, d) in rows {
        cols.extend(c);
        affinity.extend(a);
        weights.extend(wt);
        degree.push(d);
        row_ptr.push(cols.len());
    }
    Ok(AffinityOperator {
        height: h,
        width: w,
        radius,
        chi,
        row_ptr,
        cols,
        affinity,
        weights,
        degree,
    })
}
