//! Pinhole camera, SE(3) manifold operations and pointmap / ego-flow
//! computations.
//!
//! Tangent vectors are ordered `[ρ (translation, 3); ω (rotation, 3)]` and
//! `exp([ρ; ω]) = (exp(ω), J_l(ω)·ρ)`. Pixel `(x, y)` samples the image at
//! integer coordinates. Depth values that are non-finite or `<= 0` mark
//! invalid pixels.

use nalgebra::{Matrix3, Matrix4, Matrix6, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::par;

/// Depth below which a point counts as behind the camera.
pub const EPS_Z: f64 = 1e-6;

/// Depth map in meters; see [`depth_is_valid`].
pub type DepthMap = Grid<f64>;

/// Per-pixel displacement `(u, v)` in pixels.
pub type FlowField = Grid<Vector2<f64>>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("shape mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    ShapeMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
}

#[inline]
pub fn depth_is_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a camera-frame point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Set when `Z <= EPS_Z`; the pixel is meaningless in that case.
    pub behind: bool,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame ray through pixel `(x, y)` with unit Z.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Projection {
        if p.z <= EPS_Z {
            return Projection {
                pixel: Vector2::new(f64::NAN, f64::NAN),
                behind: true,
            };
        }
        Projection {
            pixel: Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy),
            behind: false,
        }
    }

    /// True when the pixel lies within `[0, w-1] × [0, h-1]` (1e-9 px slack).
    #[inline]
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        const SLACK: f64 = 1e-9;
        px.x >= -SLACK
            && px.y >= -SLACK
            && px.x <= (self.width - 1) as f64 + SLACK
            && px.y <= (self.height - 1) as f64 + SLACK
    }

    fn check_shape<T>(&self, g: &Grid<T>) -> Result<(), GeometryError> {
        if g.width() != self.width || g.height() != self.height {
            return Err(GeometryError::ShapeMismatch {
                expected_w: self.width,
                expected_h: self.height,
                got_w: g.width(),
                got_h: g.height(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// SO(3) / SE(3)
// ---------------------------------------------------------------------------

#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(sin θ)/θ`, `(1 − cos θ)/θ²`, `(θ − sin θ)/θ³` with small-angle series.
fn so3_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / (theta * theta), (theta - s) / (theta * theta * theta))
    }
}

pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b, _) = so3_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// Rotation vector of `r`, computed through the unit quaternion so that it
/// stays well conditioned up to and including θ = π.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n < 1e-8 {
        // atan2(n, w)/n ≈ 1/w − n²/(3w³)
        v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

/// SO(3) left Jacobian.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (_, a, b) = so3_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + w * a + w * w * b
}

pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let c = if theta < 1e-3 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (s, co) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - co))) / (theta * theta)
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Projects a near-rotation onto SO(3) through its SVD.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Orthonormality and handedness check at tolerance `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).norm() <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn exp(xi: &Vector6<f64>) -> Pose {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let omega = xi.fixed_rows::<3>(3).into_owned();
        Pose {
            rotation: so3_exp(&omega),
            translation: so3_left_jacobian(&omega) * rho,
        }
    }

    pub fn log(&self) -> Vector6<f64> {
        let omega = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inv(&omega) * self.translation;
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&rho);
        xi.fixed_rows_mut::<3>(3).copy_from(&omega);
        xi
    }

    /// `log(a⁻¹ · b)`.
    pub fn diff(a: &Pose, b: &Pose) -> Vector6<f64> {
        (a.inverse() * *b).log()
    }

    /// Rotation re-projected onto SO(3).
    pub fn orthonormalized(&self) -> Pose {
        Pose {
            rotation: orthonormalize(&self.rotation),
            translation: self.translation,
        }
    }

    /// Adjoint for `[ρ; ω]` tangent ordering: `[[R, t^R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * self.rotation));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Pose {
        Pose::new(q.to_rotation_matrix().into_inner(), t)
    }
}

/// SE(3) left Jacobian for `[ρ; ω]` ordering.
pub fn se3_left_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let omega = xi.fixed_rows::<3>(3).into_owned();
    let jl = so3_left_jacobian(&omega);
    let q = se3_q(&rho, &omega);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    j
}

pub fn se3_left_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let omega = xi.fixed_rows::<3>(3).into_owned();
    let jinv = so3_left_jacobian_inv(&omega);
    let q = se3_q(&rho, &omega);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(jinv * q * jinv)));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    j
}

/// SE(3) right Jacobian inverse, `J_r⁻¹(ξ) = J_l⁻¹(−ξ)`.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (c1, c2, c3) = if theta < 5e-2 {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = hat(rho);
    let w = hat(omega);
    let wp = w * p;
    let pw = p * w;
    let wpw = wp * w;
    let ww = w * w;
    p * 0.5 + (wp + pw + wpw) * c1 + (ww * p + pw * w - wpw * 3.0) * c2 + (wpw * w + ww * p * w) * c3
}

// ---------------------------------------------------------------------------
// Pointmaps and ego-flow
// ---------------------------------------------------------------------------

/// Points with per-point confidence (1.0 when the source has none).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, confidence: Vec<f64>) -> Self {
        assert_eq!(points.len(), confidence.len(), "one confidence per point");
        Self { points, confidence }
    }

    pub fn uniform(points: Vec<Vector3<f64>>) -> Self {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vector3<f64>, c: f64) {
        self.points.push(p);
        self.confidence.push(c);
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        self.confidence.extend_from_slice(&other.confidence);
    }

    pub fn transformed(&self, t: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            confidence: self.confidence.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Camera,
    World,
}

/// Per-pixel 3-D points; `None` exactly where the source depth is invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub frame: Frame,
    pub points: Grid<Option<Vector3<f64>>>,
}

pub fn unproject(depth: &DepthMap, k: &Intrinsics) -> Result<PointMap, GeometryError> {
    k.check_shape(depth)?;
    let points = Grid::from_fn(depth.width(), depth.height(), |x, y| {
        let d = *depth.get(x, y);
        depth_is_valid(d).then(|| k.ray(x as f64, y as f64) * d)
    });
    Ok(PointMap {
        frame: Frame::Camera,
        points,
    })
}

/// Flow that a static scene would exhibit from frame `t` to `t'` under the
/// given extrinsics, and a per-pixel validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoFlow {
    pub flow: FlowField,
    pub valid: Grid<bool>,
}

/// `π(K' · E' · E⁻¹ · P(x, y)) − (x, y)` per pixel. Invalid where the depth
/// is invalid, the reprojection lands behind the second camera, or outside
/// its image.
pub fn ego_flow(
    depth_t: &DepthMap,
    k_t: &Intrinsics,
    k_t2: &Intrinsics,
    e_t: &Pose,
    e_t2: &Pose,
) -> Result<EgoFlow, GeometryError> {
    k_t.check_shape(depth_t)?;
    let rel = *e_t2 * e_t.inverse();
    let (w, h) = (depth_t.width(), depth_t.height());
    let per_pixel = par::map_range(w * h, |i| {
        let (x, y) = (i % w, i / w);
        let d = depth_t.as_slice()[i];
        if !depth_is_valid(d) {
            return None;
        }
        let p = rel.transform_point(&(k_t.ray(x as f64, y as f64) * d));
        let proj = k_t2.project(&p);
        if proj.behind || !k_t2.contains(&proj.pixel) {
            return None;
        }
        Some(proj.pixel - Vector2::new(x as f64, y as f64))
    });
    let valid = Grid::from_vec(w, h, per_pixel.iter().map(Option::is_some).collect()).unwrap();
    let flow = Grid::from_vec(w, h, per_pixel.into_iter().map(|f| f.unwrap_or_else(Vector2::zeros)).collect()).unwrap();
    Ok(EgoFlow { flow, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap()
    }

    fn random_xi(rng: &mut impl Rng, max_angle: f64) -> Vector6<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            .normalize();
        let angle = rng.random_range(0.0..max_angle);
        let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&t);
        xi.fixed_rows_mut::<3>(3).copy_from(&(axis * angle));
        xi
    }

    #[test]
    fn unproject_principal_point_and_tangent() {
        let mut depth = Grid::filled(128, 96, 0.0);
        depth.set(64, 48, 2.0);
        let pm = unproject(&depth, &k()).unwrap();
        assert_eq!(pm.points.get(64, 48).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        assert!(pm.points.get(0, 0).is_none());

        let wide = Intrinsics::new(100.0, 100.0, 64.0, 48.0, 256, 96).unwrap();
        let mut d2 = Grid::filled(256, 96, f64::NAN);
        d2.set(164, 48, 1.0);
        let pm = unproject(&d2, &wide).unwrap();
        assert_eq!(pm.points.get(164, 48).unwrap(), Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn unproject_shape_mismatch() {
        let depth = Grid::filled(10, 10, 1.0);
        assert!(matches!(unproject(&depth, &k()), Err(GeometryError::ShapeMismatch { .. })));
    }

    #[test]
    fn project_examples() {
        let k = Intrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(k.project(&Vector3::new(0.0, 0.0, 5.0)).pixel, Vector2::new(320.0, 240.0));
        assert_eq!(k.project(&Vector3::new(1.0, 0.0, 1.0)).pixel, Vector2::new(420.0, 240.0));
        assert!(k.project(&Vector3::new(0.0, 0.0, -1.0)).behind);
        assert!(k.project(&Vector3::new(0.0, 0.0, 0.0)).behind);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn se3_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Pose::exp(&random_xi(&mut rng, 3.0));
        assert!(Pose::diff(&t, &t).norm() < 1e-12);
        assert_eq!(Pose::exp(&Vector6::zeros()), Pose::identity());
        let c = t * t.inverse();
        assert!((c.to_matrix() - Matrix4::identity()).norm() < 1e-9);
    }

    #[test]
    fn log_exp_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let xi = random_xi(&mut rng, std::f64::consts::PI - 1e-3);
            let back = Pose::exp(&xi).log();
            assert!((back - xi).norm() < 1e-9, "{xi:?} -> {back:?}");
        }
        // Small angles use the series branches.
        for scale in [1e-14, 1e-9, 1e-5, 1e-3, 4e-2, 6e-2] {
            let mut xi = random_xi(&mut rng, 1.0);
            let w = xi.fixed_rows::<3>(3).normalize() * scale;
            xi.fixed_rows_mut::<3>(3).copy_from(&w);
            assert!((Pose::exp(&xi).log() - xi).norm() < 1e-9);
        }
    }

    #[test]
    fn log_near_pi_is_stable() {
        for delta in [0.0, 1e-13, 1e-12, 1e-9] {
            let omega = Vector3::new(1.0, 2.0, -0.5).normalize() * (std::f64::consts::PI - delta);
            let r = so3_exp(&omega);
            let w = so3_log(&r);
            assert!(w.iter().all(|v| v.is_finite()));
            assert!((w.norm() - (std::f64::consts::PI - delta)).abs() < 1e-9);
            // ±ω both represent the rotation at exactly π.
            assert!((so3_exp(&w) - r).norm() < 1e-9);
        }
    }

    #[test]
    fn group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = Pose::exp(&random_xi(&mut rng, 3.0));
            let b = Pose::exp(&random_xi(&mut rng, 3.0));
            let c = Pose::exp(&random_xi(&mut rng, 3.0));
            let l = (a * b) * c;
            let r = a * (b * c);
            assert!((l.to_matrix() - r.to_matrix()).norm() < 1e-9);
            assert!(l.is_valid(1e-9));
            let d = Pose::diff(&a, &b);
            assert!(((a * Pose::exp(&d)).to_matrix() - b.to_matrix()).norm() < 1e-9);
        }
    }

    /// exp(ξ + δ) ≈ exp(J_l δ)·exp(ξ), checked by central differences.
    #[test]
    fn left_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for max_angle in [1e-4, 0.03, 1.0, 3.0] {
            for _ in 0..20 {
                let xi = random_xi(&mut rng, max_angle);
                let t = Pose::exp(&xi);
                let jl = se3_left_jacobian(&xi);
                let h = 1e-6;
                for k in 0..6 {
                    let mut e = Vector6::zeros();
                    e[k] = h;
                    let plus = (Pose::exp(&(xi + e)) * t.inverse()).log();
                    let minus = (Pose::exp(&(xi - e)) * t.inverse()).log();
                    let col = (plus - minus) / (2.0 * h);
                    assert!((col - jl.column(k)).norm() < 1e-6, "angle {max_angle} col {k}");
                }
                let prod = se3_left_jacobian_inv(&xi) * jl;
                assert!((prod - Matrix6::identity()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Pose::exp(&random_xi(&mut rng, 2.0));
        let xi = random_xi(&mut rng, 1.0);
        let lhs = t * Pose::exp(&xi) * t.inverse();
        let rhs = Pose::exp(&(t.adjoint() * xi));
        assert!((lhs.to_matrix() - rhs.to_matrix()).norm() < 1e-9);
    }

    #[test]
    fn orthonormalize_recovers_rotation() {
        let r = so3_exp(&Vector3::new(0.3, -0.2, 0.9));
        let noisy = r + Matrix3::from_element(1e-4);
        let o = orthonormalize(&noisy);
        assert!(Pose::new(o, Vector3::zeros()).is_valid(1e-12));
        assert!((o - r).norm() < 1e-3);
    }

    #[test]
    fn ego_flow_identity_pose_is_zero() {
        let depth = Grid::from_fn(128, 96, |x, _| 2.0 + x as f64 * 0.01);
        let e = Pose::exp(&Vector6::new(0.1, 0.2, 0.3, 0.01, 0.02, 0.03));
        let ef = ego_flow(&depth, &k(), &k(), &e, &e).unwrap();
        for (f, v) in ef.flow.as_slice().iter().zip(ef.valid.as_slice()) {
            assert!(*v);
            assert!(f.norm() < 1e-9);
        }
    }

    /// Camera centre moves by +t_x in the world; with world→camera extrinsics
    /// the second extrinsic translation is −t_x and u = −fx·t_x/d.
    #[test]
    fn ego_flow_pure_translation_parallax() {
        let d = 4.0;
        let tx = 0.2;
        let depth = Grid::filled(128, 96, d);
        let e1 = Pose::identity();
        let e2 = Pose::from_translation(Vector3::new(-tx, 0.0, 0.0));
        let ef = ego_flow(&depth, &k(), &k(), &e1, &e2).unwrap();
        let expected_u = -100.0 * tx / d;
        let mut n = 0;
        for (f, v) in ef.flow.as_slice().iter().zip(ef.valid.as_slice()) {
            if *v {
                n += 1;
                assert!((f.x - expected_u).abs() < 1e-9 && f.y.abs() < 1e-12);
            }
        }
        // Pixels whose reprojection leaves the image are invalid.
        assert_eq!(n, (128 - 5) * 96);
    }

    proptest! {
        #[test]
        fn project_unproject_round_trip(
            fx in 50.0f64..800.0, fy in 50.0f64..800.0,
            cxf in 0.0f64..0.999, cyf in 0.0f64..0.999,
            x in 0usize..64, y in 0usize..48, d in 0.05f64..100.0,
        ) {
            let k = Intrinsics::new(fx, fy, cxf * 64.0, cyf * 48.0, 64, 48).unwrap();
            let mut depth = Grid::filled(64, 48, 0.0);
            depth.set(x, y, d);
            let pm = unproject(&depth, &k).unwrap();
            let p = pm.points.get(x, y).unwrap();
            let px = k.project(&p).pixel;
            prop_assert!((px - Vector2::new(x as f64, y as f64)).norm() < 1e-6);
        }
    }
}
