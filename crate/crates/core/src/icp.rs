//! Exact nearest-neighbour search and point-to-point ICP.

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::par;

/// Static 3-d tree over a borrowed-at-build point set.
///
/// The tree is implicit: the node for the index range `[lo, hi)` sits at
/// `(lo + hi) / 2` in `order`. Queries are exact; among equidistant points
/// the lowest original index wins.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<u32>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = vec![0u8; points.len()];
        build(points, &mut order, &mut axis, 0);
        Self {
            points: points.to_vec(),
            order,
            axis,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), &mut best);
        Some(best)
    }

    /// Indices of all points within `radius` (inclusive), ascending.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.range(q, radius * radius, 0, self.order.len(), &mut out);
        out.sort_unstable();
        out
    }

    fn search(&self, q: &Vector3<f64>, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid] as usize;
        let p = &self.points[i];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && i < best.0) {
            *best = (i, d2);
        }
        let a = self.axis[mid] as usize;
        let diff = q[a] - p[a];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }

    fn range(&self, q: &Vector3<f64>, r2: f64, lo: usize, hi: usize, out: &mut Vec<usize>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid] as usize;
        let p = &self.points[i];
        if (p - q).norm_squared() <= r2 {
            out.push(i);
        }
        let a = self.axis[mid] as usize;
        let diff = q[a] - p[a];
        if diff <= 0.0 || diff * diff <= r2 {
            self.range(q, r2, lo, mid, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.range(q, r2, mid + 1, hi, out);
        }
    }
}

fn build(points: &[Vector3<f64>], order: &mut [u32], axis: &mut [u8], depth: usize) {
    if order.is_empty() {
        return;
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i as usize]);
        hi = hi.sup(&points[i as usize]);
    }
    let a = (hi - lo).imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&x, &y| {
        points[x as usize][a]
            .total_cmp(&points[y as usize][a])
            .then(x.cmp(&y))
    });
    axis[mid] = a as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (laxis, raxis) = axis.split_at_mut(mid);
    build(points, left, laxis, depth + 1);
    build(points, &mut rest[1..], &mut raxis[1..], depth + 1);
}

/// Diagonal of the axis-aligned bounding box; 0 for fewer than two points.
pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

pub fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    if points.is_empty() {
        return Vector3::zeros();
    }
    points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64
}

/// Weighted least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: Option<&[f64]>) -> Pose {
    assert_eq!(src.len(), dst.len());
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(w).sum();
    if src.is_empty() || total <= 0.0 {
        return Pose::identity();
    }
    let cs = (0..src.len()).fold(Vector3::zeros(), |a, i| a + src[i] * w(i)) / total;
    let cd = (0..dst.len()).fold(Vector3::zeros(), |a, i| a + dst[i] * w(i)) / total;
    let mut h = Matrix3::zeros();
    for i in 0..src.len() {
        h += (src[i] - cs) * (dst[i] - cd).transpose() * w(i);
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Pose::new(r, cd - r * cs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_iter: usize,
    /// Convergence threshold on the norm of the per-iteration update twist.
    pub tol: f64,
    /// Correspondence gate as a fraction of the target diameter.
    pub corr_frac: f64,
    /// Inlier gate as a fraction of the target diameter.
    pub inlier_frac: f64,
    /// Source points used while iterating; the final inlier count always
    /// uses every source point.
    pub max_source_points: usize,
    pub min_inliers: usize,
    /// RMSE bound for acceptance as a fraction of the target diameter.
    pub max_rmse_frac: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
            corr_frac: 0.05,
            inlier_frac: 0.02,
            max_source_points: 4000,
            min_inliers: 3,
            max_rmse_frac: 0.03,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    /// Maps source coordinates into the target frame.
    pub transform: Pose,
    pub inlier_count: usize,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub accepted: bool,
}

fn subsample(points: &[Vector3<f64>], max: usize) -> Vec<Vector3<f64>> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    let step = points.len() as f64 / max as f64;
    (0..max).map(|i| points[(i as f64 * step) as usize]).collect()
}

/// Cosine above which two consecutive updates count as the same direction.
const ACCEL_COS: f64 = 0.985;

/// Mean nearest-neighbour distance of `src` under `t`, each term capped at
/// `cap`.
fn truncated_mean_distance(src: &[Vector3<f64>], target: &KdTree, t: &Pose, cap: f64) -> f64 {
    let d = par::map_slice(src, |p| target.nearest(&t.transform_point(p)).unwrap().1.sqrt().min(cap));
    d.iter().sum::<f64>() / d.len() as f64
}

/// Extends an update that keeps pointing the same way: tries 2, 4, 8, …
/// times the last step and keeps the longest one that still lowers the
/// truncated mean distance.
fn accelerate(src: &[Vector3<f64>], target: &KdTree, cap: f64, next: &Pose, delta: &Vector6<f64>) -> Pose {
    let mut best = *next;
    let mut best_cost = truncated_mean_distance(src, target, next, cap);
    let mut scale = 1.0;
    for _ in 0..5 {
        let cand = Pose::exp(&(delta * scale)) * best;
        let cost = truncated_mean_distance(src, target, &cand, cap);
        if cost >= best_cost {
            break;
        }
        best = cand.orthonormalized();
        best_cost = cost;
        scale *= 2.0;
    }
    best
}

/// Point-to-point ICP of `source` against the tree over the target cloud.
///
/// When consecutive updates point the same way the step is extended by a
/// doubling line search on the truncated mean correspondence distance.
pub fn icp(source: &[Vector3<f64>], target: &KdTree, init: &Pose, params: &IcpParams) -> IcpResult {
    let diam = bbox_diagonal(target.points());
    let corr = params.corr_frac * diam;
    let inlier = params.inlier_frac * diam;
    let src = subsample(source, params.max_source_points);
    let mut t = *init;
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_delta = None;
    if !target.is_empty() && !src.is_empty() {
        for it in 0..params.max_iter {
            iterations = it + 1;
            let nn = par::map_slice(&src, |p| target.nearest(&t.transform_point(p)).unwrap());
            let (a, b): (Vec<_>, Vec<_>) = nn
                .iter()
                .zip(&src)
                .filter(|((_, d2), _)| d2.sqrt() <= corr)
                .map(|((j, _), p)| (*p, target.points()[*j]))
                .unzip();
            if a.len() < 3 {
                break;
            }
            let mut next = kabsch(&a, &b, None).orthonormalized();
            let delta = (next * t.inverse()).log();
            let step = delta.norm();
            if prev_delta.is_some_and(|p: Vector6<f64>| p.dot(&delta) > ACCEL_COS * p.norm() * step) {
                next = accelerate(&src, target, corr, &next, &delta);
            }
            prev_delta = Some((next * t.inverse()).log());
            t = next;
            if step < params.tol {
                converged = true;
                break;
            }
        }
    }
    let (inlier_count, rmse) = inlier_stats(source, target, &t, inlier);
    let accepted = inlier_count >= params.min_inliers.max(3) && rmse <= params.max_rmse_frac * diam;
    IcpResult {
        transform: t,
        inlier_count,
        rmse,
        iterations,
        converged,
        accepted,
    }
}

/// One-to-one inliers under `t`: each target point keeps only its closest
/// source point (lowest source index on ties).
pub fn inlier_stats(source: &[Vector3<f64>], target: &KdTree, t: &Pose, gate: f64) -> (usize, f64) {
    if target.is_empty() {
        return (0, f64::INFINITY);
    }
    let nn = par::map_slice(source, |p| target.nearest(&t.transform_point(p)).unwrap());
    let mut claim: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    for (j, d2) in nn {
        if d2.sqrt() <= gate {
            let e = claim.entry(j).or_insert(f64::INFINITY);
            if d2 < *e {
                *e = d2;
            }
        }
    }
    if claim.is_empty() {
        return (0, f64::INFINITY);
    }
    let mut d2s: Vec<f64> = claim.into_values().collect();
    d2s.sort_by(f64::total_cmp);
    let n = d2s.len();
    (n, (d2s.iter().sum::<f64>() / n as f64).sqrt())
}
