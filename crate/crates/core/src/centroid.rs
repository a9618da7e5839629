//! Offset-field clustering and the centroid-count (subitizing) objective.
//!
//! The offset field `V` predicts, for every pixel, the displacement to its
//! instance centroid. Chasing the field (`v_i <- v_i + V(p_i + v_i)`) moves
//! every pixel's pointer onto a fixed point; fixed points become centroids,
//! and pixels are assigned to the nearest centroid of their chased target.

use crate::error::{Error, Result};
use crate::maps::{round_to_pixel, DenseMap, InstanceLabelMap, OffsetField};
use crate::par;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_EPS: f64 = 0.5;
pub const DEFAULT_THETA: f64 = 0.5;
/// Saliency values at or above this count as salient.
pub const SALIENCY_THRESHOLD: f32 = 0.5;

/// Result of [`chase_offsets`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChaseOutcome {
    pub field: OffsetField,
    /// Iterations that applied at least one update.
    pub iterations: usize,
    /// Pixels whose last update was still at least `eps` long.
    pub unsettled: Vec<bool>,
}

impl ChaseOutcome {
    pub fn converged(&self) -> bool {
        !self.unsettled.iter().any(|&u| u)
    }

    pub fn unsettled_count(&self) -> usize {
        self.unsettled.iter().filter(|&&u| u).count()
    }
}

/// Iterates `v_i <- v_i + V(round(p_i + v_i))` against the input field `V`.
///
/// A pixel whose update is shorter than `eps` has reached a fixed point and
/// keeps its vector; since the update only depends on the pixel's own
/// pointer it would never change again. The loop stops when every pixel has
/// settled or after `max_iters` rounds, in which case the remaining pixels
/// (typically cycles) are reported in [`ChaseOutcome::unsettled`].
pub fn chase_offsets(field: &OffsetField, max_iters: usize, eps: f64) -> ChaseOutcome {
    let (h, w) = (field.height(), field.width());
    let max_iters = max_iters.max(1);
    let per_pixel = par::map_range(field.len(), |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut v = field.get(i);
        let mut rounds = 0;
        for _ in 0..max_iters {
            let u = field.get(round_to_pixel(y + v[0], x + v[1], h, w));
            if u[0].hypot(u[1]) < eps {
                return (v, rounds, false);
            }
            v = [v[0] + u[0], v[1] + u[1]];
            rounds += 1;
        }
        let u = field.get(round_to_pixel(y + v[0], x + v[1], h, w));
        (v, rounds, u[0].hypot(u[1]) >= eps)
    });
    let iterations = per_pixel.iter().map(|p| p.1).max().unwrap_or(0);
    let unsettled = per_pixel.iter().map(|p| p.2).collect();
    let vectors = per_pixel.into_iter().map(|p| p.0).collect();
    // Clamping can only pull a vector back inside the image.
    let field = OffsetField::new(h, w, vectors).expect("chased vectors stay finite");
    ChaseOutcome {
        field,
        iterations,
        unsettled,
    }
}

/// Centroid pixel coordinates `(y, x)`, unique and inside the image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CentroidSet {
    centroids: Vec<(usize, usize)>,
}

impl CentroidSet {
    pub fn new(centroids: Vec<(usize, usize)>, height: usize, width: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &(y, x) in &centroids {
            if y >= height || x >= width {
                return Err(Error::OutOfRange(format!(
                    "centroid ({y}, {x}) outside {height}x{width} image"
                )));
            }
            if !seen.insert((y, x)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate centroid ({y}, {x})"
                )));
            }
        }
        Ok(Self { centroids })
    }

    pub fn centroids(&self) -> &[(usize, usize)] {
        &self.centroids
    }

    /// `T*`, the number of centroids.
    pub fn count(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

/// Centroids of a chased field: pixels with `|v| < eps`, merged by
/// 8-connectivity, one centroid per component at the floor of its mean
/// coordinate. Components are ordered by their first pixel in raster order.
pub fn extract_centroids(chased: &OffsetField, eps: f64) -> CentroidSet {
    extract_centroids_within(chased, eps, None)
}

/// Like [`extract_centroids`], but only pixels with `mask[i] == true` can
/// be centroid candidates.
pub fn extract_centroids_within(
    chased: &OffsetField,
    eps: f64,
    mask: Option<&[bool]>,
) -> CentroidSet {
    let (h, w) = (chased.height(), chased.width());
    let candidate: Vec<bool> = chased
        .vectors()
        .iter()
        .enumerate()
        .map(|(i, v)| v[0].hypot(v[1]) < eps && mask.map_or(true, |m| m[i]))
        .collect();
    let (labels, count) = label_components(&candidate, h, w);
    let mut sums = vec![(0usize, 0usize, 0usize); count];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            let s = &mut sums[l as usize - 1];
            s.0 += i / w;
            s.1 += i % w;
            s.2 += 1;
        }
    }
    let mut centroids = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for (sy, sx, n) in sums {
        let c = (sy / n, sx / n);
        // Distinct components can share a mass-center pixel only in
        // contrived layouts; keep the first.
        if seen.insert(c) {
            centroids.push(c);
        }
    }
    CentroidSet { centroids }
}

/// 8-connected component labeling of a boolean mask with union-find.
/// Returns per-pixel labels (`0` outside the mask) and the component count;
/// ids follow the raster order of each component's first pixel.
pub fn label_components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, usize) {
    let n = height * width;
    let mut parent: Vec<usize> = (0..n).collect();

    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            // Earlier neighbors in raster order: W, NW, N, NE.
            let mut neighbors = [None; 4];
            if x > 0 {
                neighbors[0] = Some(i - 1);
            }
            if y > 0 {
                neighbors[2] = Some(i - width);
                if x > 0 {
                    neighbors[1] = Some(i - width - 1);
                }
                if x + 1 < width {
                    neighbors[3] = Some(i - width + 1);
                }
            }
            for j in neighbors.into_iter().flatten() {
                if mask[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        // Root at the smaller index keeps ids in raster order.
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }

    let mut ids = vec![0u32; n];
    let mut labels = vec![0u32; n];
    let mut count = 0usize;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let root = find(&mut parent, i);
        if ids[root] == 0 {
            count += 1;
            ids[root] = count as u32;
        }
        labels[i] = ids[root];
    }
    (labels, count)
}

/// Assigns every pixel to `argmin_n |p_i + v_i - p_{c_n}|`, ties going to
/// the lowest centroid index. Labels are `1..=count` in centroid order.
pub fn assign_pixels(field: &OffsetField, centroids: &CentroidSet) -> Result<InstanceLabelMap> {
    if centroids.is_empty() {
        return Err(Error::EmptyCentroids);
    }
    let w = field.width();
    let cs = centroids.centroids();
    let labels = par::map_range(field.len(), |i| {
        let v = field.get(i);
        let py = (i / w) as f64 + v[0];
        let px = (i % w) as f64 + v[1];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (n, &(cy, cx)) in cs.iter().enumerate() {
            let d = (py - cy as f64).powi(2) + (px - cx as f64).powi(2);
            if d < best_d {
                best_d = d;
                best = n;
            }
        }
        best as u32 + 1
    });
    // A centroid that wins no pixel (possible when centroids sit very close
    // together) is dropped by compaction.
    InstanceLabelMap::compact(field.height(), field.width(), labels)
}

/// Binarizes a single-channel saliency map at [`SALIENCY_THRESHOLD`].
pub fn salient_mask(saliency: &DenseMap) -> Vec<bool> {
    saliency
        .data()
        .iter()
        .map(|&s| s >= SALIENCY_THRESHOLD)
        .collect()
}

fn check_saliency(saliency: &DenseMap, height: usize, width: usize) -> Result<()> {
    saliency.expect_channels("saliency map", 1)?;
    saliency.expect_size("saliency map", height, width)?;
    saliency.check_probability()
}

/// Keeps instance `n` iff `|SI_n ∩ S| / |SI_n| > theta` with `S` the
/// binarized saliency; survivors are renumbered `1..` in original order.
pub fn filter_salient(
    instances: &InstanceLabelMap,
    saliency: &DenseMap,
    theta: f64,
) -> Result<InstanceLabelMap> {
    check_saliency(saliency, instances.height(), instances.width())?;
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::OutOfRange(format!("theta {theta} outside [0, 1]")));
    }
    let salient = salient_mask(saliency);
    let n = instances.count() as usize;
    let mut area = vec![0usize; n];
    let mut hit = vec![0usize; n];
    for (&l, &s) in instances.labels().iter().zip(&salient) {
        if l > 0 {
            area[l as usize - 1] += 1;
            if s {
                hit[l as usize - 1] += 1;
            }
        }
    }
    let mut remap = vec![0u32; n + 1];
    let mut next = 0;
    for k in 0..n {
        if hit[k] as f64 / area[k] as f64 > theta {
            next += 1;
            remap[k + 1] = next;
        }
    }
    let labels = instances
        .labels()
        .iter()
        .map(|&l| remap[l as usize])
        .collect();
    InstanceLabelMap::new(instances.height(), instances.width(), labels)
}

/// Ground-truth salient instance count `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubitizingTarget(pub u32);

/// `(T* - T)^2`.
pub fn subitizing_loss(t_star: u32, target: SubitizingTarget) -> f64 {
    let d = t_star as f64 - target.0 as f64;
    d * d
}

/// Surrogate gradient of the subitizing loss with respect to the offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SubitizingGradient {
    pub height: usize,
    pub width: usize,
    /// Per-pixel `(d/d dy, d/d dx)`; zero outside the salient region.
    pub field: Vec<[f64; 2]>,
    /// Number of salient pixels.
    pub k: usize,
}

impl SubitizingGradient {
    pub fn is_zero(&self) -> bool {
        self.field.iter().all(|g| g[0] == 0.0 && g[1] == 0.0)
    }
}

/// Broadcasts `dL/dT* = 2 (T* - T)` over the `K` salient offsets, scaled by
/// `1/K`. `T*` is piecewise constant in the offsets, so the unit surrogate
/// `dT*/dv = 1` stands in for the true (almost-everywhere zero) derivative.
pub fn subitizing_gradient(
    instances: &InstanceLabelMap,
    saliency: &DenseMap,
    t_star: u32,
    target: SubitizingTarget,
) -> Result<SubitizingGradient> {
    let (h, w) = (instances.height(), instances.width());
    check_saliency(saliency, h, w)?;
    let salient = salient_mask(saliency);
    let k = salient.iter().filter(|&&s| s).count();
    let value = if k == 0 || t_star == target.0 {
        0.0
    } else {
        2.0 * (t_star as f64 - target.0 as f64) / k as f64
    };
    let field = salient
        .iter()
        .map(|&s| if s { [value, value] } else { [0.0, 0.0] })
        .collect();
    Ok(SubitizingGradient {
        height: h,
        width: w,
        field,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::strategy::ValueTree;

    fn field(h: usize, w: usize, v: &[[f64; 2]]) -> OffsetField {
        OffsetField::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn zero_field_is_fixed() {
        let f = OffsetField::zeros(3, 4);
        let out = chase_offsets(&f, 1, DEFAULT_EPS);
        assert!(out.converged());
        assert_eq!(out.iterations, 0);
        assert_eq!(out.field, f);
    }

    #[test]
    fn three_pixel_chain() {
        let f = field(1, 3, &[[0.0, 1.0], [0.0, 1.0], [0.0, 0.0]]);
        let out = chase_offsets(&f, DEFAULT_MAX_ITERS, DEFAULT_EPS);
        assert!(out.converged());
        assert_eq!(out.field.vectors(), &[[0.0, 2.0], [0.0, 1.0], [0.0, 0.0]]);
        assert!((0..3).all(|i| out.field.target(i) == 2));
    }

    #[test]
    fn two_cycle_never_settles() {
        let f = field(1, 2, &[[0.0, 1.0], [0.0, -1.0]]);
        let out = chase_offsets(&f, 7, DEFAULT_EPS);
        assert!(!out.converged());
        assert_eq!(out.unsettled, vec![true, true]);
        assert_eq!(out.iterations, 7);
        // Brute force: the pointer of pixel 0 alternates between 1 and 0.
        let v = [1i64, -1];
        let mut pos = v[0];
        for _ in 0..7 {
            pos += v[pos as usize];
        }
        assert_eq!(out.field.target(0), pos as usize);
    }

    #[test]
    fn all_zero_field_single_centroid() {
        let c = extract_centroids(&OffsetField::zeros(4, 4), DEFAULT_EPS);
        assert_eq!(c.centroids(), &[(1, 1)]);
    }

    #[test]
    fn two_fixed_points() {
        let (h, w) = (4, 4);
        let mut v = Vec::new();
        for i in 0..h * w {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            // Pixels above the anti-diagonal point at (0,0), the rest at (3,3).
            let (ty, tx) = if y + x < 3.0 || (y + x == 3.0 && y < 2.0) {
                (0.0, 0.0)
            } else {
                (3.0, 3.0)
            };
            v.push([ty - y, tx - x]);
        }
        let f = field(h, w, &v);
        let chased = chase_offsets(&f, DEFAULT_MAX_ITERS, DEFAULT_EPS).field;
        let c = extract_centroids(&chased, DEFAULT_EPS);
        assert_eq!(c.centroids(), &[(0, 0), (3, 3)]);
    }

    #[test]
    fn no_fixed_point_no_centroid() {
        let f = field(1, 2, &[[0.0, 1.0], [0.0, -1.0]]);
        let c = extract_centroids(&f, DEFAULT_EPS);
        assert_eq!(c.count(), 0);
    }

    #[test]
    fn assignment_examples() {
        let f = OffsetField::zeros(1, 4);
        let one = CentroidSet::new(vec![(0, 2)], 1, 4).unwrap();
        assert_eq!(assign_pixels(&f, &one).unwrap().labels(), &[1, 1, 1, 1]);
        let two = CentroidSet::new(vec![(0, 0), (0, 3)], 1, 4).unwrap();
        assert_eq!(assign_pixels(&f, &two).unwrap().labels(), &[1, 1, 2, 2]);
        // x=1 is equidistant from centroids at x=0 and x=2.
        let tie = CentroidSet::new(vec![(0, 0), (0, 2)], 1, 4).unwrap();
        assert_eq!(assign_pixels(&f, &tie).unwrap().labels()[1], 1);
        assert!(matches!(
            assign_pixels(&f, &CentroidSet::default()),
            Err(Error::EmptyCentroids)
        ));
    }

    #[test]
    fn centroid_set_validation() {
        assert!(CentroidSet::new(vec![(0, 0), (0, 0)], 2, 2).is_err());
        assert!(CentroidSet::new(vec![(2, 0)], 2, 2).is_err());
    }

    fn ten_pixel_scene(salient: usize) -> (InstanceLabelMap, DenseMap) {
        let labels = InstanceLabelMap::new(1, 10, vec![1; 10]).unwrap();
        let s = (0..10)
            .map(|i| if i < salient { 1.0 } else { 0.0 })
            .collect();
        (labels, DenseMap::new(1, 10, 1, s).unwrap())
    }

    #[test]
    fn filter_examples() {
        let (l, s) = ten_pixel_scene(10);
        assert_eq!(filter_salient(&l, &s, 0.5).unwrap().count(), 1);
        let (l, s) = ten_pixel_scene(3);
        assert_eq!(filter_salient(&l, &s, 0.5).unwrap().count(), 0);
        let (l, s) = ten_pixel_scene(1);
        assert_eq!(filter_salient(&l, &s, 0.0).unwrap().count(), 1);
        let bad = DenseMap::zeros(2, 5, 1);
        assert!(matches!(
            filter_salient(&l, &bad, 0.5),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn filter_renumbers_in_order() {
        let l = InstanceLabelMap::new(1, 6, vec![1, 1, 2, 2, 3, 3]).unwrap();
        let s = DenseMap::new(1, 6, 1, vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.9]).unwrap();
        let out = filter_salient(&l, &s, 0.5).unwrap();
        assert_eq!(out.labels(), &[1, 1, 0, 0, 2, 2]);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(subitizing_loss(2, SubitizingTarget(2)), 0.0);
        assert_eq!(subitizing_loss(3, SubitizingTarget(2)), 1.0);
        assert_eq!(subitizing_loss(0, SubitizingTarget(4)), 16.0);
    }

    #[test]
    fn gradient_examples() {
        let l = InstanceLabelMap::background(2, 4);
        let s = DenseMap::new(2, 4, 1, vec![1.0, 1.0, 0.0, 0.0, 0.7, 0.5, 0.2, 0.0]).unwrap();
        let g = subitizing_gradient(&l, &s, 3, SubitizingTarget(2)).unwrap();
        assert_eq!(g.k, 4);
        for (i, v) in g.field.iter().enumerate() {
            let expect = if [0, 1, 4, 5].contains(&i) { 0.5 } else { 0.0 };
            assert_eq!(*v, [expect, expect]);
        }
        assert!(subitizing_gradient(&l, &s, 2, SubitizingTarget(2))
            .unwrap()
            .is_zero());
        let empty = DenseMap::zeros(2, 4, 1);
        let g = subitizing_gradient(&l, &empty, 5, SubitizingTarget(1)).unwrap();
        assert_eq!(g.k, 0);
        assert!(g.is_zero());
    }

    #[test]
    fn components_eight_connected() {
        #[rustfmt::skip]
        let mask = [
            true,  false, false,
            false, true,  false,
            false, false, true,
        ];
        let (labels, n) = label_components(&mask, 3, 3);
        assert_eq!(n, 1);
        assert_eq!(labels[8], 1);
        #[rustfmt::skip]
        let mask = [
            false, true,  false, true,
            true,  false, false, true,
        ];
        let (labels, n) = label_components(&mask, 2, 4);
        assert_eq!(n, 2);
        assert_eq!(labels, vec![0, 1, 0, 2, 1, 0, 0, 2]);
    }

    fn arb_field(h: usize, w: usize) -> impl Strategy<Value = OffsetField> {
        proptest::collection::vec((-4i32..=4, -4i32..=4), h * w).prop_map(move |v| {
            let v = v.into_iter().map(|(a, b)| [a as f64, b as f64]).collect();
            OffsetField::new(h, w, v).unwrap()
        })
    }

    /// Fields whose pointers form a forest: pixel `order[k]` points at some
    /// earlier pixel in `order` or is a root with a short residual offset.
    fn arb_forest(h: usize, w: usize) -> impl Strategy<Value = OffsetField> {
        (
            Just((0..h * w).collect::<Vec<usize>>()).prop_shuffle(),
            proptest::collection::vec((any::<u32>(), 0u8..5, -0.3f64..0.3), h * w),
        )
            .prop_map(move |(order, picks)| {
                let mut v = vec![[0.0; 2]; h * w];
                for (k, &i) in order.iter().enumerate() {
                    let (pick, kind, residual) = picks[k];
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    v[i] = if k == 0 || kind == 0 {
                        [residual, -residual]
                    } else {
                        let j = order[pick as usize % k];
                        [(j / w) as f64 - y, (j % w) as f64 - x]
                    };
                }
                OffsetField::new(h, w, v).unwrap()
            })
    }

    #[test]
    fn forest_fields_converge() {
        let mut runner = proptest::test_runner::TestRunner::deterministic();
        for _ in 0..50 {
            let f = arb_forest(6, 6).new_tree(&mut runner).unwrap().current();
            assert!(chase_offsets(&f, DEFAULT_MAX_ITERS, DEFAULT_EPS).converged());
        }
    }

    proptest! {
        #[test]
        fn chase_idempotent_when_converged(f in prop_oneof![arb_forest(6, 6), arb_field(6, 6)]) {
            let first = chase_offsets(&f, DEFAULT_MAX_ITERS, DEFAULT_EPS);
            if !first.converged() {
                return Ok(());
            }
            let second = chase_offsets(&first.field, DEFAULT_MAX_ITERS, DEFAULT_EPS);
            for (a, b) in first.field.vectors().iter().zip(second.field.vectors()) {
                prop_assert!((a[0] - b[0]).hypot(a[1] - b[1]) <= DEFAULT_EPS);
            }
        }

        #[test]
        fn filter_monotone_in_theta(
            labels in proptest::collection::vec(0u32..4, 30),
            sal in proptest::collection::vec(0.0f32..=1.0, 30),
            t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0,
        ) {
            let l = InstanceLabelMap::compact(5, 6, labels).unwrap();
            let s = DenseMap::new(5, 6, 1, sal).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = filter_salient(&l, &s, lo).unwrap().count();
            let b = filter_salient(&l, &s, hi).unwrap().count();
            prop_assert!(b <= a);
            prop_assert!(a <= l.count());
        }

        #[test]
        fn gradient_magnitude_exact(
            sal in proptest::collection::vec(0.0f32..=1.0, 24),
            t_star in 0u32..8, t in 0u32..8,
        ) {
            let s = DenseMap::new(4, 6, 1, sal).unwrap();
            let l = InstanceLabelMap::background(4, 6);
            let g = subitizing_gradient(&l, &s, t_star, SubitizingTarget(t)).unwrap();
            let mask = salient_mask(&s);
            prop_assert_eq!(g.k, mask.iter().filter(|&&m| m).count());
            prop_assert_eq!(g.is_zero(), t_star == t || g.k == 0);
            for (v, &m) in g.field.iter().zip(&mask) {
                if m {
                    let want = 2.0 * (t_star as f64 - t as f64).abs() / g.k as f64;
                    prop_assert!((v[0].abs() - want).abs() <= 1e-12);
                    prop_assert!((v[1].abs() - want).abs() <= 1e-12);
                } else {
                    prop_assert_eq!(*v, [0.0, 0.0]);
                }
            }
        }
    }
}
