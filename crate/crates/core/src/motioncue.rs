//! Multi-stage dynamic-region identification.
//!
//! 1. **Flow cue**: a Gaussian mixture over the 2-D flow vectors; every
//!    pixel outside the cluster with the smallest mean flow magnitude is a
//!    candidate mover.
//! 2. **Geometry cue**: observed flow minus the ego-flow a static scene
//!    would produce, thresholded with Otsu's method.
//! 3. **Robust cue**: matched keypoints are lifted to world coordinates;
//!    inside candidate regions, keypoints whose 3-D displacement deviates
//!    from the static mean mark their region as dynamic.
//!
//! Masks are then carried between frames by flow warping, and the geometry
//! cue is monitored for movers not yet covered by the tracked mask.

use log::warn;
use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{depth_is_valid, ego_flow, DepthMap, FlowField, GeometryError, Intrinsics, Pose};
use crate::grid::{Grid, Mask};
use crate::par;

/// Number of Otsu histogram bins.
pub const OTSU_BINS: usize = 256;
/// Eigenvalue floor for GMM covariances (px²).
pub const COV_FLOOR: f64 = 1e-6;
/// Clusters whose weight falls below this are removed.
pub const MIN_CLUSTER_WEIGHT: f64 = 1e-6;

const E_STEP_BLOCK: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum MotionCueError {
    #[error("need at least {required} valid pixels for {k} clusters, got {got}")]
    TooFewPixels { required: usize, got: usize, k: usize },
    #[error("degenerate value distribution: fewer than two distinct values")]
    DegenerateDistribution,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("shape mismatch between {0}")]
    ShapeMismatch(&'static str),
}

// ---------------------------------------------------------------------------
// Gaussian mixture
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GmmResult {
    /// Cluster index per pixel, `None` for pixels excluded from the fit.
    pub labels: Grid<Option<usize>>,
    pub means: Vec<Vector2<f64>>,
    pub covariances: Vec<Matrix2<f64>>,
    pub weights: Vec<f64>,
    pub log_likelihood: f64,
    /// Log-likelihood evaluated at the start of every EM iteration.
    pub ll_history: Vec<f64>,
    /// Iterations after which a collapsed cluster was removed. The
    /// likelihood is only guaranteed monotone between these points.
    pub collapses: Vec<usize>,
}

impl GmmResult {
    pub fn effective_k(&self) -> usize {
        self.means.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GmmParams {
    pub max_iter: usize,
    /// Stop when the per-iteration gain drops below `tol * max(1, |ll|)`.
    pub tol: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-8 }
    }
}

struct Gaussian {
    mean: Vector2<f64>,
    inv: Matrix2<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: Vector2<f64>, cov: &Matrix2<f64>) -> Self {
        let det = cov.determinant();
        let inv = cov.try_inverse().expect("floored covariance is invertible");
        Self {
            mean,
            inv,
            log_norm: -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln(),
        }
    }

    #[inline]
    fn log_pdf(&self, x: &Vector2<f64>) -> f64 {
        let (u, v) = (x.x - self.mean.x, x.y - self.mean.y);
        let q = self.inv[(0, 0)] * u * u + 2.0 * self.inv[(0, 1)] * u * v + self.inv[(1, 1)] * v * v;
        self.log_norm - 0.5 * q
    }
}

/// Clips the eigenvalues of a symmetric 2×2 matrix from below.
fn floor_covariance(c: &Matrix2<f64>) -> Matrix2<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(COV_FLOOR));
    let v = eig.eigenvectors;
    v * Matrix2::from_diagonal(&vals) * v.transpose()
}

/// k-means++ seeding. Stops early when every remaining point coincides with
/// a chosen centre.
fn kmeans_pp(data: &[Vector2<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector2<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|x| (x - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = data.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        if d2[pick] <= 0.0 {
            // Only reachable through rounding at the tail of the scan.
            match d2.iter().rposition(|&w| w > 0.0) {
                Some(i) => pick = i,
                None => break,
            }
        }
        let c = data[pick];
        centers.push(c);
        for (di, x) in d2.iter_mut().zip(data) {
            *di = di.min((x - c).norm_squared());
        }
    }
    centers
}

/// Full-covariance EM over the flow vectors at `valid` pixels, seeded with
/// k-means++ from `seed`.
pub fn fit_gmm(flow: &FlowField, valid: &Mask, k: usize, seed: u64) -> Result<GmmResult, MotionCueError> {
    fit_gmm_with(flow, valid, k, seed, GmmParams::default())
}

pub fn fit_gmm_with(
    flow: &FlowField,
    valid: &Mask,
    k: usize,
    seed: u64,
    params: GmmParams,
) -> Result<GmmResult, MotionCueError> {
    if !flow.same_shape(valid) {
        return Err(MotionCueError::ShapeMismatch("flow and validity mask"));
    }
    let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid.as_slice()[i]).collect();
    let k = k.max(1);
    if idx.len() < 10 * k {
        return Err(MotionCueError::TooFewPixels {
            required: 10 * k,
            got: idx.len(),
            k,
        });
    }
    let data: Vec<Vector2<f64>> = idx.iter().map(|&i| flow.as_slice()[i]).collect();
    let n = data.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(&data, k, &mut rng);

    // Hard assignment to the seeds gives the first M-step.
    let mut kk = centers.len();
    let mut resp = vec![0.0; data.len() * kk];
    for (x, r) in data.iter().zip(resp.chunks_exact_mut(kk)) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centers.iter().enumerate() {
            let d = (x - c).norm_squared();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        r[best] = 1.0;
    }

    let mut means = Vec::new();
    let mut covs = Vec::new();
    let mut weights = Vec::new();
    let mut ll_history = Vec::new();
    let mut collapses = Vec::new();
    let mut ll = f64::NEG_INFINITY;

    for iter in 0..=params.max_iter {
        // M-step
        let mut nk = vec![0.0; kk];
        let mut sum = vec![Vector2::zeros(); kk];
        for (x, r) in data.iter().zip(resp.chunks_exact(kk)) {
            for j in 0..kk {
                nk[j] += r[j];
                sum[j] += x * r[j];
            }
        }
        let keep: Vec<usize> = (0..kk).filter(|&j| nk[j] / n >= MIN_CLUSTER_WEIGHT).collect();
        if keep.len() < kk && iter > 0 {
            collapses.push(iter);
        }
        means = keep.iter().map(|&j| sum[j] / nk[j]).collect();
        let mut scatter = vec![Matrix2::zeros(); keep.len()];
        for (x, r) in data.iter().zip(resp.chunks_exact(kk)) {
            for (s, (&j, m)) in scatter.iter_mut().zip(keep.iter().zip(&means)) {
                let d = x - m;
                *s += d * d.transpose() * r[j];
            }
        }
        covs = scatter
            .iter()
            .zip(&keep)
            .map(|(s, &j)| floor_covariance(&(s / nk[j])))
            .collect();
        let kept_mass: f64 = keep.iter().map(|&j| nk[j]).sum();
        weights = keep.iter().map(|&j| nk[j] / kept_mass).collect();
        kk = keep.len();

        // E-step, in fixed-size blocks so the summation order does not
        // depend on the thread pool.
        let comps: Vec<Gaussian> = means.iter().zip(&covs).map(|(m, c)| Gaussian::new(*m, c)).collect();
        let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let blocks: Vec<&[Vector2<f64>]> = data.chunks(E_STEP_BLOCK).collect();
        let per_block: Vec<(f64, Vec<f64>)> = par::map_slice(&blocks, |xs| {
            let mut lls = 0.0;
            let mut out = vec![0.0; xs.len() * kk];
            for (x, r) in xs.iter().zip(out.chunks_exact_mut(kk)) {
                let mut m = f64::NEG_INFINITY;
                for (rj, (g, lw)) in r.iter_mut().zip(comps.iter().zip(&log_w)) {
                    *rj = lw + g.log_pdf(x);
                    m = m.max(*rj);
                }
                let mut total = 0.0;
                for rj in r.iter_mut() {
                    *rj = (*rj - m).exp();
                    total += *rj;
                }
                for rj in r.iter_mut() {
                    *rj /= total;
                }
                lls += m + total.ln();
            }
            (lls, out)
        });
        let new_ll: f64 = per_block.iter().map(|(l, _)| l).sum();
        resp.clear();
        for (_, r) in per_block {
            resp.extend_from_slice(&r);
        }
        ll_history.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain.is_finite() && gain.abs() <= params.tol * ll.abs().max(1.0) {
            break;
        }
    }

    let mut labels = Grid::filled(flow.width(), flow.height(), None);
    for (&i, r) in idx.iter().zip(resp.chunks_exact(kk)) {
        let mut best = 0;
        for j in 1..r.len() {
            if r[j] > r[best] {
                best = j;
            }
        }
        labels.as_mut_slice()[i] = Some(best);
    }
    Ok(GmmResult {
        labels,
        means,
        covariances: covs,
        weights,
        log_likelihood: ll,
        ll_history,
        collapses,
    })
}

/// Index of the cluster with the smallest mean flow magnitude over its
/// member pixels. Ties within 1e-12 go to the lowest index.
pub fn static_cluster(g: &GmmResult, flow: &FlowField) -> Option<usize> {
    let k = g.effective_k();
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (label, f) in g.labels.as_slice().iter().zip(flow.as_slice()) {
        if let Some(l) = *label {
            sum[l] += f.norm();
            count[l] += 1;
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for j in 0..k {
        if count[j] == 0 {
            continue;
        }
        let mean = sum[j] / count[j] as f64;
        match best {
            Some((_, m)) if mean >= m - 1e-12 => {}
            _ => best = Some((j, mean)),
        }
    }
    best.map(|(j, _)| j)
}

/// Flow motion cue: true for labelled pixels outside the minimum-magnitude
/// cluster.
pub fn flow_motion_cue(g: &GmmResult, flow: &FlowField) -> Mask {
    let bg = static_cluster(g, flow);
    g.labels.map(|l| match (l, bg) {
        (Some(l), Some(b)) => *l != b,
        _ => false,
    })
}

// ---------------------------------------------------------------------------
// Otsu
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn between_class_variance(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let m0 = s0 as f64 / n0 as f64;
    let m1 = s1 as f64 / n1 as f64;
    (n0 as f64) * (n1 as f64) * (m0 - m1) * (m0 - m1)
}

/// Histogram bin of `v` for 256 uniform bins over `[0, max]`.
#[inline]
pub fn otsu_bin(v: f64, max: f64) -> usize {
    ((v / max * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu threshold over a 256-bin histogram spanning `[0, max(values)]`.
///
/// Every bin boundary `t ∈ 1..256` is scored by the between-class variance
/// (class means use bin centres). When several consecutive boundaries share
/// the maximum score, the threshold sits at the middle of that run.
/// Non-finite and negative values are ignored.
pub fn otsu_threshold(values: &[f64]) -> Result<f64, MotionCueError> {
    let vals: Vec<f64> = values.iter().copied().filter(|v| v.is_finite() && *v >= 0.0).collect();
    let Some(first) = vals.first().copied() else {
        return Err(MotionCueError::DegenerateDistribution);
    };
    if vals.iter().all(|&v| v == first) {
        return Err(MotionCueError::DegenerateDistribution);
    }
    let max = vals.iter().cloned().fold(0.0, f64::max);
    let mut hist = [0u64; OTSU_BINS];
    for &v in &vals {
        hist[otsu_bin(v, max)] += 1;
    }
    let scores: Vec<f64> = (1..OTSU_BINS)
        .map(|t| {
            let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
            for (b, &h) in hist.iter().enumerate() {
                let centre2 = 2 * b as u64 + 1;
                if b < t {
                    n0 += h;
                    s0 += h * centre2;
                } else {
                    n1 += h;
                    s1 += h * centre2;
                }
            }
            between_class_variance(n0, s0, n1, s1)
        })
        .collect();
    let (t_lo, t_hi) = best_boundary_run(&scores);
    if scores[t_lo - 1] <= 0.0 {
        return Err(MotionCueError::DegenerateDistribution);
    }
    Ok((t_lo + t_hi) as f64 * 0.5 * max / OTSU_BINS as f64)
}

/// First maximal run of the score vector, as 1-based boundary indices.
pub(crate) fn best_boundary_run(scores: &[f64]) -> (usize, usize) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let mut end = best;
    while end + 1 < scores.len() && scores[end + 1] == scores[best] {
        end += 1;
    }
    (best + 1, end + 1)
}

// ---------------------------------------------------------------------------
// Geometry cue
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoCueParams {
    /// Residuals at or below this are never dynamic, whatever Otsu says (px).
    pub min_residual: f64,
}

impl Default for GeoCueParams {
    fn default() -> Self {
        Self { min_residual: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct GeometryCue {
    /// `‖flow − ego_flow‖`, `NaN` where ego-flow is invalid.
    pub residual: Grid<f64>,
    pub m_geo: Mask,
    /// Effective threshold; `None` when the frame was treated as all-static.
    pub tau: Option<f64>,
}

pub fn geometry_motion_cue(
    flow: &FlowField,
    depth: &DepthMap,
    k_t: &Intrinsics,
    k_t2: &Intrinsics,
    e_t: &Pose,
    e_t2: &Pose,
    params: &GeoCueParams,
) -> Result<GeometryCue, MotionCueError> {
    if !flow.same_shape(depth) {
        return Err(MotionCueError::ShapeMismatch("flow and depth"));
    }
    let ego = ego_flow(depth, k_t, k_t2, e_t, e_t2)?;
    let residual = Grid::from_vec(
        flow.width(),
        flow.height(),
        par::map_range(flow.len(), |i| {
            if ego.valid.as_slice()[i] {
                (flow.as_slice()[i] - ego.flow.as_slice()[i]).norm()
            } else {
                f64::NAN
            }
        }),
    )
    .unwrap();
    let valid: Vec<f64> = residual.as_slice().iter().copied().filter(|v| v.is_finite()).collect();
    let max = valid.iter().cloned().fold(0.0, f64::max);
    let all_static = |residual: Grid<f64>| GeometryCue {
        m_geo: Grid::filled(flow.width(), flow.height(), false),
        residual,
        tau: None,
    };
    if max <= params.min_residual {
        return Ok(all_static(residual));
    }
    let tau = match otsu_threshold(&valid) {
        Ok(t) => t.max(params.min_residual),
        Err(MotionCueError::DegenerateDistribution) => return Ok(all_static(residual)),
        Err(e) => return Err(e),
    };
    let m_geo = residual.map(|r| r.is_finite() && *r > tau);
    Ok(GeometryCue {
        residual,
        m_geo,
        tau: Some(tau),
    })
}

// ---------------------------------------------------------------------------
// Robust keypoint cue
// ---------------------------------------------------------------------------

/// One correspondence from frame `t` to frame `t'`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointMatch {
    pub pixel_t: Vector2<f64>,
    pub pixel_t2: Vector2<f64>,
    pub score: f64,
}

pub type KeypointMatches = Vec<KeypointMatch>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustCueParams {
    /// Magnitude test: `‖d − d̄‖ > mag_k · σ`.
    pub mag_k: f64,
    /// Direction test threshold (radians).
    pub ang_max: f64,
    /// Minimum `‖d̄‖` (and `‖d‖`) for the direction test (m).
    pub eps_mean: f64,
    /// Floor on the static displacement spread σ (m).
    pub min_sigma: f64,
    /// Split candidate components that hold both static and dynamic
    /// keypoints along the geometry cue.
    pub refine_mixed: bool,
}

impl Default for RobustCueParams {
    fn default() -> Self {
        Self {
            mag_k: 3.0,
            ang_max: 45f64.to_radians(),
            eps_mean: 1e-3,
            min_sigma: 0.01,
            refine_mixed: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RobustCue {
    pub m_dyn: Mask,
    /// Per input match; unusable matches are `false`.
    pub dynamic: Vec<bool>,
    /// Set when there was no static reference and `m_dyn` fell back to `m_geo`.
    pub fallback: bool,
}

/// Depth at a sub-pixel location: bilinear when all four neighbours are
/// valid, otherwise the nearest pixel.
pub fn sample_depth(depth: &DepthMap, px: &Vector2<f64>) -> Option<f64> {
    let (w, h) = (depth.width() as f64, depth.height() as f64);
    if !(px.x >= 0.0 && px.y >= 0.0 && px.x <= w - 1.0 && px.y <= h - 1.0) {
        return None;
    }
    let x0 = px.x.floor() as usize;
    let y0 = px.y.floor() as usize;
    let x1 = (x0 + 1).min(depth.width() - 1);
    let y1 = (y0 + 1).min(depth.height() - 1);
    let (fx, fy) = (px.x - x0 as f64, px.y - y0 as f64);
    let q = [*depth.get(x0, y0), *depth.get(x1, y0), *depth.get(x0, y1), *depth.get(x1, y1)];
    if q.iter().all(|&d| depth_is_valid(d)) {
        return Some(
            q[0] * (1.0 - fx) * (1.0 - fy) + q[1] * fx * (1.0 - fy) + q[2] * (1.0 - fx) * fy + q[3] * fx * fy,
        );
    }
    let d = *depth.get(px.x.round() as usize, px.y.round() as usize);
    depth_is_valid(d).then_some(d)
}

fn lift(depth: &DepthMap, k: &Intrinsics, e: &Pose, px: &Vector2<f64>) -> Option<Vector3<f64>> {
    let d = sample_depth(depth, px)?;
    Some(e.inverse().transform_point(&(k.ray(px.x, px.y) * d)))
}

fn round_pixel(px: &Vector2<f64>, w: usize, h: usize) -> Option<(usize, usize)> {
    let (x, y) = (px.x.round(), px.y.round());
    (x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h).then(|| (x as usize, y as usize))
}

#[allow(clippy::too_many_arguments)]
pub fn robust_motion_cue(
    matches: &[KeypointMatch],
    depth_t: &DepthMap,
    depth_t2: &DepthMap,
    k_t: &Intrinsics,
    k_t2: &Intrinsics,
    e_t: &Pose,
    e_t2: &Pose,
    m_flow: &Mask,
    m_geo: &Mask,
    params: &RobustCueParams,
) -> RobustCue {
    let candidates = m_flow.union(m_geo);
    let (w, h) = (candidates.width(), candidates.height());
    let fallback = || RobustCue {
        m_dyn: m_geo.clone(),
        dynamic: vec![false; matches.len()],
        fallback: true,
    };

    // (match index, pixel in frame t, displacement, inside candidates)
    let lifted: Vec<(usize, (usize, usize), Vector3<f64>, bool)> = matches
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let px = round_pixel(&m.pixel_t, w, h)?;
            let a = lift(depth_t, k_t, e_t, &m.pixel_t)?;
            let b = lift(depth_t2, k_t2, e_t2, &m.pixel_t2)?;
            Some((i, px, b - a, *candidates.get(px.0, px.1)))
        })
        .collect();
    if lifted.len() < 4 {
        warn!("robust cue: only {} usable matches, falling back to geometry cue", lifted.len());
        return fallback();
    }
    let statics: Vec<&Vector3<f64>> = lifted.iter().filter(|l| !l.3).map(|l| &l.2).collect();
    if statics.is_empty() {
        warn!("robust cue: no static reference keypoints, falling back to geometry cue");
        return fallback();
    }
    let ns = statics.len() as f64;
    let mean = statics.iter().fold(Vector3::zeros(), |acc, d| acc + *d) / ns;
    let mag_mean = statics.iter().map(|d| d.norm()).sum::<f64>() / ns;
    let var = statics.iter().map(|d| (d.norm() - mag_mean).powi(2)).sum::<f64>() / ns;
    let sigma = var.sqrt().max(params.min_sigma);

    let mut dynamic = vec![false; matches.len()];
    let mut static_inside = Vec::new();
    for (i, px, d, inside) in &lifted {
        if !inside {
            continue;
        }
        let by_mag = (d - mean).norm() > params.mag_k * sigma;
        let by_dir = mean.norm() > params.eps_mean
            && d.norm() > params.eps_mean
            && d.angle(&mean) > params.ang_max;
        if by_mag || by_dir {
            dynamic[*i] = true;
        } else {
            static_inside.push(*px);
        }
    }

    let (labels, ncomp) = candidates.components();
    let mut has_dyn = vec![false; ncomp];
    let mut has_static = vec![false; ncomp];
    let dyn_pixels: Vec<(usize, usize)> = lifted.iter().filter(|l| dynamic[l.0]).map(|l| l.1).collect();
    for &(x, y) in &dyn_pixels {
        if let Some(c) = labels.get(x, y) {
            has_dyn[*c as usize] = true;
        }
    }
    for &(x, y) in &static_inside {
        if let Some(c) = labels.get(x, y) {
            has_static[*c as usize] = true;
        }
    }

    let mut m_dyn = labels.map(|l| l.is_some_and(|c| has_dyn[c as usize]));
    if params.refine_mixed {
        let geo_part = m_dyn.intersection(m_geo);
        let (geo_labels, ngeo) = geo_part.components();
        let mut geo_dyn = vec![false; ngeo];
        for &(x, y) in &dyn_pixels {
            if let Some(c) = geo_labels.get(x, y) {
                geo_dyn[*c as usize] = true;
            }
        }
        // Which candidate components have a dynamic sub-component in m_geo.
        let mut refinable = vec![false; ncomp];
        for i in 0..geo_labels.len() {
            if let (Some(g), Some(c)) = (geo_labels.as_slice()[i], labels.as_slice()[i]) {
                if geo_dyn[g as usize] {
                    refinable[c as usize] = true;
                }
            }
        }
        for i in 0..m_dyn.len() {
            let Some(c) = labels.as_slice()[i] else { continue };
            let c = c as usize;
            if has_dyn[c] && has_static[c] && refinable[c] {
                let keep = geo_labels.as_slice()[i].is_some_and(|g| geo_dyn[g as usize]);
                m_dyn.as_mut_slice()[i] = keep;
            }
        }
    }
    RobustCue {
        m_dyn,
        dynamic,
        fallback: false,
    }
}

// ---------------------------------------------------------------------------
// Tracking and monitoring
// ---------------------------------------------------------------------------

/// Forward-warps the true pixels of `prev` by `flow_prev_to_cur`, then
/// closes the result with a 3×3 element.
pub fn propagate_mask(prev: &Mask, flow_prev_to_cur: &FlowField) -> Mask {
    assert!(prev.same_shape(flow_prev_to_cur), "mask/flow shape mismatch");
    let (w, h) = (prev.width(), prev.height());
    let mut out = Grid::filled(w, h, false);
    for i in 0..prev.len() {
        if !prev.as_slice()[i] {
            continue;
        }
        let (x, y) = prev.coords(i);
        let target = Vector2::new(x as f64, y as f64) + flow_prev_to_cur.as_slice()[i];
        if let Some((tx, ty)) = round_pixel(&target, w, h) {
            out.set(tx, ty, true);
        }
    }
    out.close3()
}

/// Backward-warps `prev` using flow from the current frame to the previous
/// one: a current pixel is set when the location it came from was set.
pub fn propagate_mask_backward(prev: &Mask, flow_cur_to_prev: &FlowField) -> Mask {
    assert!(prev.same_shape(flow_cur_to_prev), "mask/flow shape mismatch");
    let (w, h) = (prev.width(), prev.height());
    Grid::from_fn(w, h, |x, y| {
        let src = Vector2::new(x as f64, y as f64) + flow_cur_to_prev.get(x, y);
        round_pixel(&src, w, h).is_some_and(|(sx, sy)| *prev.get(sx, sy))
    })
    .close3()
}

/// Mask tracking step: warp the previous dynamic mask into the current
/// frame, then snap it to the geometry-cue components it overlaps. Keeps the
/// warped mask when it overlaps none.
pub fn track_mask(prev_dyn: &Mask, flow_cur_to_prev: &FlowField, m_geo_cur: &Mask) -> Mask {
    let warped = propagate_mask_backward(prev_dyn, flow_cur_to_prev);
    let (labels, n) = m_geo_cur.components();
    let mut hit = vec![false; n];
    for (l, &w) in labels.as_slice().iter().zip(warped.as_slice()) {
        if let (Some(c), true) = (l, w) {
            hit[*c as usize] = true;
        }
    }
    if !hit.iter().any(|&h| h) {
        return warped;
    }
    labels.map(|l| l.is_some_and(|c| hit[c as usize])).close3()
}

/// True when the part of the geometry cue not covered by the current
/// dynamic mask exceeds `delta_new` of the image.
pub fn detect_new_movers(m_geo_cur: &Mask, m_dyn_cur: &Mask, delta_new: f64) -> bool {
    let uncovered = m_geo_cur.difference(m_dyn_cur).count();
    uncovered as f64 / m_geo_cur.len() as f64 > delta_new
}

// ---------------------------------------------------------------------------
// Full three-cue segmentation of one frame pair
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DynamicMask {
    pub m_flow: Mask,
    pub m_geo: Mask,
    pub m_dyn: Mask,
    pub tau_geo: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub gmm_k: usize,
    pub seed: u64,
    pub geo: GeoCueParams,
    pub robust: RobustCueParams,
    pub delta_new: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            gmm_k: 3,
            seed: 0,
            geo: GeoCueParams::default(),
            robust: RobustCueParams::default(),
            delta_new: 0.01,
        }
    }
}

/// Inputs for segmenting frame `t` against frame `t'`.
pub struct FramePair<'a> {
    pub flow: &'a FlowField,
    pub depth_t: &'a DepthMap,
    pub depth_t2: &'a DepthMap,
    pub k_t: &'a Intrinsics,
    pub k_t2: &'a Intrinsics,
    pub e_t: &'a Pose,
    pub e_t2: &'a Pose,
    pub matches: &'a [KeypointMatch],
}

pub fn segment_pair(pair: &FramePair<'_>, params: &SegmentParams) -> Result<DynamicMask, MotionCueError> {
    let valid = pair.depth_t.map(|d| depth_is_valid(*d));
    let m_flow = match fit_gmm(pair.flow, &valid, params.gmm_k, params.seed) {
        Ok(g) => flow_motion_cue(&g, pair.flow),
        Err(MotionCueError::TooFewPixels { .. }) => Grid::filled(valid.width(), valid.height(), false),
        Err(e) => return Err(e),
    };
    let geo = geometry_motion_cue(pair.flow, pair.depth_t, pair.k_t, pair.k_t2, pair.e_t, pair.e_t2, &params.geo)?;
    let robust = robust_motion_cue(
        pair.matches,
        pair.depth_t,
        pair.depth_t2,
        pair.k_t,
        pair.k_t2,
        pair.e_t,
        pair.e_t2,
        &m_flow,
        &geo.m_geo,
        &params.robust,
    );
    Ok(DynamicMask {
        m_flow,
        m_geo: geo.m_geo,
        m_dyn: robust.m_dyn,
        tau_geo: geo.tau,
    })
}
