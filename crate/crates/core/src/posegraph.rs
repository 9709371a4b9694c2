//! Robust factor-graph refinement of a camera trajectory over static
//! landmarks.
//!
//! The state is one pose per frame and one 3-D point per landmark. Poses are
//! held as camera→world transforms `T_i = E_i⁻¹`, so a common rigid change of
//! world frame acts by left multiplication and the relative-motion factors
//! are invariant to it. Pose updates use the right retraction `T · exp(δ)`
//! with `δ = [ρ; ω]`.
//!
//! The objective is
//!
//! ```text
//! C = ½‖f_prior‖²_Σp⁻¹ + Σ ρ_δ(‖f_proj‖_Σo⁻¹) + ½ Σ ‖f_motion‖²_Σm⁻¹
//! ```
//!
//! with the Huber function ρ applied to the whitened reprojection norm, and
//! is minimized by Levenberg–Marquardt with the landmarks eliminated through
//! their Schur complement.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::{
    DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix6, Matrix6x3, SMatrix, Vector2, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hat, se3_right_jacobian_inv, Intrinsics, Pose};
use crate::grid::Mask;
use crate::icp::KdTree;
use crate::membank::{AlignmentResult, MemoryMap};
use crate::motioncue::sample_depth;
use crate::par;
use crate::pipeline::FrameBundle;

pub const DEFAULT_HUBER_DELTA: f64 = 2.0;
pub const DEFAULT_ALPHA_MEM: f64 = 0.25;
/// Camera-frame depth below which a landmark counts as behind the camera.
const MIN_DEPTH: f64 = 1e-6;
/// Whitened residual charged to an observation that falls behind the camera
/// during a trial step.
const BEHIND_PENALTY: f64 = 1e3;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("invalid factor graph: {0}")]
    Invalid(String),
    #[error("normal equations stayed singular up to lambda = {lambda:e}")]
    Singular { lambda: f64 },
    #[error("non-finite residual in {factor}")]
    NonFinite { factor: String },
    #[error("memory landmarks need an accepted alignment")]
    RejectedAlignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    /// World position (m).
    pub position: Vector3<f64>,
    pub from_memory: bool,
    /// Stored position of a memory landmark, used by the optional anchor
    /// factor.
    pub anchor: Option<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub landmark: usize,
    pub pixel: Vector2<f64>,
    /// Pixel covariance (px²).
    pub sigma_proj: Matrix2<f64>,
    /// Prior depth (m) of the observed pixel.
    #[serde(default)]
    pub depth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorGraphProblem {
    pub intrinsics: Vec<Intrinsics>,
    /// Current camera→world estimates.
    pub poses: Vec<Pose>,
    /// Initial camera→world poses `T⁰` referenced by the prior and motion
    /// factors.
    pub init_poses: Vec<Pose>,
    pub landmarks: Vec<Landmark>,
    pub observations: Vec<Observation>,
    pub sigma_prior: Matrix6<f64>,
    pub sigma_motion: Matrix6<f64>,
    pub huber_delta: f64,
    pub alpha_mem: f64,
    /// Include the prior factor on `T_0`.
    pub use_prior: bool,
    /// σ (m) of an isotropic prior tying memory landmarks to their stored
    /// position; `None` leaves them free.
    pub sigma_anchor: Option<f64>,
}

pub fn default_sigma_prior() -> Matrix6<f64> {
    Matrix6::identity() * 1e-6
}

pub fn default_sigma_motion() -> Matrix6<f64> {
    Matrix6::identity() * 1e-2
}

/// Motion covariance matching independent per-frame initialization noise of
/// `trans_sigma` (m) and `rot_sigma` (rad) per axis: the relative pose of two
/// frames carries twice the variance.
pub fn motion_sigma_for_noise(trans_sigma: f64, rot_sigma: f64) -> Matrix6<f64> {
    let (t, r) = (2.0 * trans_sigma * trans_sigma, 2.0 * rot_sigma * rot_sigma);
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

impl FactorGraphProblem {
    /// A graph with camera→world initial poses and default weights.
    pub fn new(intrinsics: Vec<Intrinsics>, init_poses: Vec<Pose>) -> Self {
        Self {
            intrinsics,
            poses: init_poses.clone(),
            init_poses,
            landmarks: Vec::new(),
            observations: Vec::new(),
            sigma_prior: default_sigma_prior(),
            sigma_motion: default_sigma_motion(),
            huber_delta: DEFAULT_HUBER_DELTA,
            alpha_mem: DEFAULT_ALPHA_MEM,
            use_prior: true,
            sigma_anchor: None,
        }
    }

    /// Same as [`FactorGraphProblem::new`] from world→camera extrinsics.
    pub fn from_extrinsics(intrinsics: Vec<Intrinsics>, extrinsics: &[Pose]) -> Self {
        Self::new(intrinsics, extrinsics.iter().map(Pose::inverse).collect())
    }

    pub fn add_landmark(&mut self, position: Vector3<f64>, from_memory: bool) -> usize {
        let id = self.landmarks.len();
        self.landmarks.push(Landmark {
            id,
            position,
            from_memory,
            anchor: from_memory.then_some(position),
        });
        id
    }

    pub fn add_observation(&mut self, frame: usize, landmark: usize, pixel: Vector2<f64>, sigma_proj: Matrix2<f64>) {
        self.observations.push(Observation {
            frame,
            landmark,
            pixel,
            sigma_proj,
            depth: None,
        });
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.poses.len();
        if n == 0 {
            return Err(GraphError::Invalid("no poses".into()));
        }
        if self.init_poses.len() != n || self.intrinsics.len() != n {
            return Err(GraphError::Invalid(format!(
                "{} poses, {} initial poses, {} intrinsics",
                n,
                self.init_poses.len(),
                self.intrinsics.len()
            )));
        }
        for (i, p) in self.poses.iter().chain(&self.init_poses).enumerate() {
            if !p.is_valid(1e-6) {
                return Err(GraphError::Invalid(format!("pose {} is not a rigid transform", i % n)));
            }
        }
        for (j, l) in self.landmarks.iter().enumerate() {
            if l.id != j {
                return Err(GraphError::Invalid(format!("landmark at index {j} has id {}", l.id)));
            }
            if !l.position.iter().all(|v| v.is_finite()) {
                return Err(GraphError::Invalid(format!("landmark {j} is not finite")));
            }
        }
        for (o, ob) in self.observations.iter().enumerate() {
            if ob.frame >= n || ob.landmark >= self.landmarks.len() {
                return Err(GraphError::Invalid(format!("observation {o} references a missing frame or landmark")));
            }
            if sqrt_info(&ob.sigma_proj).is_none() {
                return Err(GraphError::Invalid(format!("observation {o} covariance is not SPD")));
            }
        }
        if sqrt_info(&self.sigma_prior).is_none() || sqrt_info(&self.sigma_motion).is_none() {
            return Err(GraphError::Invalid("prior or motion covariance is not SPD".into()));
        }
        if !(self.alpha_mem > 0.0 && self.alpha_mem <= 1.0) {
            return Err(GraphError::Invalid(format!("alpha_mem = {} outside (0, 1]", self.alpha_mem)));
        }
        if !(self.huber_delta > 0.0) {
            return Err(GraphError::Invalid("huber_delta must be positive".into()));
        }
        if self.sigma_anchor.is_some_and(|s| !(s > 0.0)) {
            return Err(GraphError::Invalid("sigma_anchor must be positive".into()));
        }
        Ok(())
    }

    pub fn extrinsics(&self) -> Vec<Pose> {
        self.poses.iter().map(Pose::inverse).collect()
    }

    /// Total cost at the current state with every observation active.
    pub fn cost(&self) -> Result<f64, GraphError> {
        self.validate()?;
        let ctx = Context::new(self)?;
        let state = State {
            poses: self.poses.clone(),
            points: self.landmarks.iter().map(|l| l.position).collect(),
        };
        let active = vec![true; self.observations.len()];
        ctx.cost(&state, &active, &ctx.usable(&active))
    }
}

/// Upper-triangular `W` with `WᵀW = Σ⁻¹`.
pub fn sqrt_info<const D: usize>(sigma: &SMatrix<f64, D, D>) -> Option<SMatrix<f64, D, D>> {
    if !sigma.iter().all(|v| v.is_finite()) || (sigma - sigma.transpose()).amax() > 1e-9 * sigma.amax().max(1.0) {
        return None;
    }
    let info = sigma.try_inverse()?;
    let info = (info + info.transpose()) * 0.5;
    Some(info.cholesky()?.l().transpose())
}

/// Huber cost and IRLS weight of a residual norm.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r <= delta {
        (0.5 * r * r, 1.0)
    } else {
        (delta * (r - delta * 0.5), delta / r)
    }
}

/// `π(T⁻¹ L) − z`; `None` when the landmark is behind the camera.
pub fn residual_projection(t: &Pose, l: &Vector3<f64>, k: &Intrinsics, z: &Vector2<f64>) -> Option<Vector2<f64>> {
    let pc = t.rotation.transpose() * (l - t.translation);
    (pc.z > MIN_DEPTH).then(|| Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - z)
}

/// Jacobians of [`residual_projection`] with respect to the pose tangent and
/// the landmark.
pub fn projection_jacobians(t: &Pose, l: &Vector3<f64>, k: &Intrinsics) -> Option<(SMatrix<f64, 2, 6>, Matrix2x3<f64>)> {
    let rt = t.rotation.transpose();
    let pc = rt * (l - t.translation);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / pc.z;
    let dpi = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    );
    let mut jt = SMatrix::<f64, 2, 6>::zeros();
    jt.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-dpi));
    jt.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dpi * hat(&pc)));
    Some((jt, dpi * rt))
}

/// `T_0⁰ ⊖ T_0 = log((T_0⁰)⁻¹ T_0)`.
pub fn residual_prior(t0: &Pose, t0_init: &Pose) -> Vector6<f64> {
    Pose::diff(t0_init, t0)
}

pub fn prior_jacobian(t0: &Pose, t0_init: &Pose) -> Matrix6<f64> {
    se3_right_jacobian_inv(&residual_prior(t0, t0_init))
}

/// `log(((T_p⁰)⁻¹ T_c⁰)⁻¹ · T_p⁻¹ T_c)`.
pub fn residual_motion(t_prev: &Pose, t_cur: &Pose, t_prev_init: &Pose, t_cur_init: &Pose) -> Vector6<f64> {
    Pose::diff(&(t_prev_init.inverse() * *t_cur_init), &(t_prev.inverse() * *t_cur))
}

/// Jacobians of [`residual_motion`] with respect to `(T_prev, T_cur)`.
pub fn motion_jacobians(
    t_prev: &Pose,
    t_cur: &Pose,
    t_prev_init: &Pose,
    t_cur_init: &Pose,
) -> (Matrix6<f64>, Matrix6<f64>) {
    let r = residual_motion(t_prev, t_cur, t_prev_init, t_cur_init);
    let jinv = se3_right_jacobian_inv(&r);
    let rel = t_prev.inverse() * *t_cur;
    (-(jinv * rel.inverse().adjoint()), jinv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveParams {
    pub max_iter: usize,
    pub lambda_init: f64,
    pub lambda_max: f64,
    pub rel_tol: f64,
    pub step_tol: f64,
    /// Observations whose whitened residual exceeds this multiple of the
    /// median are deactivated between outer iterations.
    pub outlier_factor: f64,
    pub max_outer: usize,
    /// Rescale the solution about the first camera so landmark depths match
    /// the observations' prior depths (median ratio). Skipped when anchored
    /// memory landmarks fix the scale or no observation carries a depth.
    pub metric_scale: bool,
}

impl Default for SolveParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            lambda_init: 1e-4,
            lambda_max: 1e8,
            rel_tol: 1e-8,
            step_tol: 1e-8,
            outlier_factor: 3.0,
            max_outer: 10,
            metric_scale: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    RelativeDecrease,
    SmallStep,
    MaxIterations,
    /// No damping level produced a cost decrease.
    LambdaLimit,
    /// Nothing to optimize.
    Trivial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub outer_iterations: usize,
    /// Cost at the start of each outer segment followed by the cost after
    /// every accepted step within it.
    pub segments: Vec<Vec<f64>>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub deactivated: usize,
    /// Observations skipped during linearization because their landmark was
    /// behind the camera.
    pub behind_camera: usize,
    pub termination: Termination,
    /// Factor applied by the metric-scale correction (1 when skipped).
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl SolveReport {
    /// Whether every segment's cost sequence is non-increasing.
    pub fn monotone(&self) -> bool {
        self.segments.iter().all(|s| s.windows(2).all(|w| w[1] <= w[0]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    /// Refined camera→world poses.
    pub poses: Vec<Pose>,
    pub landmarks: Vec<Landmark>,
    /// Final activity flag per observation.
    pub active: Vec<bool>,
    pub report: SolveReport,
}

impl SolveResult {
    pub fn extrinsics(&self) -> Vec<Pose> {
        self.poses.iter().map(Pose::inverse).collect()
    }

    /// RMS reprojection error (px) over active observations, optionally only
    /// those of memory landmarks.
    pub fn reprojection_rmse(&self, problem: &FactorGraphProblem, memory_only: bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (ob, &act) in problem.observations.iter().zip(&self.active) {
            let l = &self.landmarks[ob.landmark];
            if !act || (memory_only && !l.from_memory) {
                continue;
            }
            if let Some(r) = residual_projection(&self.poses[ob.frame], &l.position, &problem.intrinsics[ob.frame], &ob.pixel) {
                sum += r.norm_squared();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }
}

#[derive(Clone)]
struct State {
    poses: Vec<Pose>,
    points: Vec<Vector3<f64>>,
}

/// Precomputed whitening and graph structure.
struct Context<'a> {
    p: &'a FactorGraphProblem,
    w_obs: Vec<Matrix2<f64>>,
    w_prior: Matrix6<f64>,
    w_motion: Matrix6<f64>,
    w_anchor: Option<f64>,
}

struct ObsLin {
    rw: Vector2<f64>,
    jt: SMatrix<f64, 2, 6>,
    jl: Matrix2x3<f64>,
}

impl<'a> Context<'a> {
    fn new(p: &'a FactorGraphProblem) -> Result<Self, GraphError> {
        let w_obs = p
            .observations
            .iter()
            .map(|o| sqrt_info(&o.sigma_proj).ok_or_else(|| GraphError::Invalid("covariance is not SPD".into())))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            p,
            w_obs,
            w_prior: sqrt_info(&p.sigma_prior).ok_or_else(|| GraphError::Invalid("prior covariance".into()))?,
            w_motion: sqrt_info(&p.sigma_motion).ok_or_else(|| GraphError::Invalid("motion covariance".into()))?,
            w_anchor: p.sigma_anchor.map(|s| 1.0 / s),
        })
    }

    fn anchored(&self, j: usize) -> Option<Vector3<f64>> {
        self.w_anchor.and(self.p.landmarks[j].anchor)
    }

    /// A landmark takes part in the solve when it is anchored or seen from at
    /// least two distinct frames through active observations.
    fn usable(&self, active: &[bool]) -> Vec<bool> {
        let m = self.p.landmarks.len();
        let mut first: Vec<Option<usize>> = vec![None; m];
        let mut multi = vec![false; m];
        for (o, &a) in self.p.observations.iter().zip(active) {
            if !a {
                continue;
            }
            match first[o.landmark] {
                None => first[o.landmark] = Some(o.frame),
                Some(f) if f != o.frame => multi[o.landmark] = true,
                _ => {}
            }
        }
        (0..m).map(|j| multi[j] || (first[j].is_some() && self.anchored(j).is_some())).collect()
    }

    fn whitened_obs(&self, state: &State, o: usize) -> Result<Option<Vector2<f64>>, GraphError> {
        let ob = &self.p.observations[o];
        let r = residual_projection(&state.poses[ob.frame], &state.points[ob.landmark], &self.p.intrinsics[ob.frame], &ob.pixel);
        match r {
            Some(r) if r.iter().all(|v| v.is_finite()) => Ok(Some(self.w_obs[o] * r)),
            Some(_) => Err(GraphError::NonFinite {
                factor: format!("projection (frame {}, landmark {})", ob.frame, ob.landmark),
            }),
            None => Ok(None),
        }
    }

    fn cost(&self, state: &State, active: &[bool], usable: &[bool]) -> Result<f64, GraphError> {
        let p = self.p;
        let per_obs = par::map_range(p.observations.len(), |o| {
            if !active[o] || !usable[p.observations[o].landmark] {
                return Ok(0.0);
            }
            Ok(match self.whitened_obs(state, o)? {
                Some(rw) => huber(rw.norm(), p.huber_delta).0,
                None => huber(BEHIND_PENALTY, p.huber_delta).0,
            })
        });
        let mut c = 0.0;
        for v in per_obs {
            c += v?;
        }
        if p.use_prior {
            let r = self.w_prior * residual_prior(&state.poses[0], &p.init_poses[0]);
            check_finite(&r, || "prior (frame 0)".into())?;
            c += 0.5 * r.norm_squared();
        }
        for i in 1..state.poses.len() {
            let r = self.w_motion * residual_motion(&state.poses[i - 1], &state.poses[i], &p.init_poses[i - 1], &p.init_poses[i]);
            check_finite(&r, || format!("motion (frames {}-{})", i - 1, i))?;
            c += 0.5 * r.norm_squared();
        }
        if let Some(w) = self.w_anchor {
            for (j, l) in p.landmarks.iter().enumerate() {
                if let (Some(a), true) = (l.anchor, usable[j]) {
                    c += 0.5 * (w * (state.points[j] - a)).norm_squared();
                }
            }
        }
        Ok(c)
    }

    /// Whitened residual norm of every observation (∞ behind the camera).
    fn obs_norms(&self, state: &State) -> Result<Vec<f64>, GraphError> {
        par::map_range(self.p.observations.len(), |o| Ok(self.whitened_obs(state, o)?.map_or(f64::INFINITY, |r| r.norm())))
            .into_iter()
            .collect()
    }
}

fn check_finite(r: &Vector6<f64>, name: impl FnOnce() -> String) -> Result<(), GraphError> {
    if r.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GraphError::NonFinite { factor: name() })
    }
}

/// Normal equations with landmarks kept separate for the Schur complement.
struct Normal {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    gl: Vec<Vector3<f64>>,
    /// Per landmark: `(frame, H_pl block)`.
    hpl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
    behind: usize,
}

fn add_block6(h: &mut DMatrix<f64>, a: usize, b: usize, m: &Matrix6<f64>) {
    let mut v = h.fixed_view_mut::<6, 6>(6 * a, 6 * b);
    v += m;
}

fn linearize(ctx: &Context, state: &State, active: &[bool], usable: &[bool]) -> Result<Normal, GraphError> {
    let p = ctx.p;
    let n = state.poses.len();
    let m = state.points.len();
    let mut nq = Normal {
        hpp: DMatrix::zeros(6 * n, 6 * n),
        gp: DVector::zeros(6 * n),
        hll: vec![Matrix3::zeros(); m],
        gl: vec![Vector3::zeros(); m],
        hpl: vec![Vec::new(); m],
        behind: 0,
    };
    let lins: Vec<Result<Option<(ObsLin, f64)>, GraphError>> = par::map_range(p.observations.len(), |o| {
        let ob = &p.observations[o];
        if !active[o] || !usable[ob.landmark] {
            return Ok(None);
        }
        let Some(rw) = ctx.whitened_obs(state, o)? else {
            return Ok(None);
        };
        let Some((jt, jl)) = projection_jacobians(&state.poses[ob.frame], &state.points[ob.landmark], &p.intrinsics[ob.frame]) else {
            return Ok(None);
        };
        let w = huber(rw.norm(), p.huber_delta).1;
        Ok(Some((
            ObsLin {
                rw,
                jt: ctx.w_obs[o] * jt,
                jl: ctx.w_obs[o] * jl,
            },
            w,
        )))
    });
    for (o, lin) in lins.into_iter().enumerate() {
        let ob = &p.observations[o];
        match lin? {
            Some((l, w)) => {
                let (i, j) = (ob.frame, ob.landmark);
                add_block6(&mut nq.hpp, i, i, &(l.jt.transpose() * l.jt * w));
                let mut g = nq.gp.fixed_rows_mut::<6>(6 * i);
                g += l.jt.transpose() * l.rw * w;
                nq.hll[j] += l.jl.transpose() * l.jl * w;
                nq.gl[j] += l.jl.transpose() * l.rw * w;
                let block = l.jt.transpose() * l.jl * w;
                match nq.hpl[j].iter_mut().find(|(f, _)| *f == i) {
                    Some((_, b)) => *b += block,
                    None => nq.hpl[j].push((i, block)),
                }
            }
            None if active[o] && usable[ob.landmark] => nq.behind += 1,
            None => {}
        }
    }
    if p.use_prior {
        let r = ctx.w_prior * residual_prior(&state.poses[0], &p.init_poses[0]);
        let j = ctx.w_prior * prior_jacobian(&state.poses[0], &p.init_poses[0]);
        add_block6(&mut nq.hpp, 0, 0, &(j.transpose() * j));
        let mut g = nq.gp.fixed_rows_mut::<6>(0);
        g += j.transpose() * r;
    }
    for i in 1..n {
        let (tp, tc, tp0, tc0) = (&state.poses[i - 1], &state.poses[i], &p.init_poses[i - 1], &p.init_poses[i]);
        let r = ctx.w_motion * residual_motion(tp, tc, tp0, tc0);
        let (jp, jc) = motion_jacobians(tp, tc, tp0, tc0);
        let (jp, jc) = (ctx.w_motion * jp, ctx.w_motion * jc);
        add_block6(&mut nq.hpp, i - 1, i - 1, &(jp.transpose() * jp));
        add_block6(&mut nq.hpp, i, i, &(jc.transpose() * jc));
        add_block6(&mut nq.hpp, i - 1, i, &(jp.transpose() * jc));
        add_block6(&mut nq.hpp, i, i - 1, &(jc.transpose() * jp));
        let mut g = nq.gp.fixed_rows_mut::<6>(6 * (i - 1));
        g += jp.transpose() * r;
        let mut g = nq.gp.fixed_rows_mut::<6>(6 * i);
        g += jc.transpose() * r;
    }
    if let Some(w) = ctx.w_anchor {
        for (j, l) in p.landmarks.iter().enumerate() {
            if let (Some(a), true) = (l.anchor, usable[j]) {
                nq.hll[j] += Matrix3::identity() * (w * w);
                nq.gl[j] += (state.points[j] - a) * (w * w);
            }
        }
    }
    Ok(nq)
}

/// Damped step `(δ_poses, δ_points)`; `None` when the system is not positive
/// definite at this damping.
fn damped_step(nq: &Normal, usable: &[bool], lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let np = nq.gp.len();
    let mut s = nq.hpp.clone();
    for k in 0..np {
        s[(k, k)] += lambda * s[(k, k)].max(1e-9);
    }
    let mut b = -nq.gp.clone();
    let mut hll_inv = vec![Matrix3::zeros(); nq.hll.len()];
    for (j, h) in nq.hll.iter().enumerate() {
        if !usable[j] || nq.hpl[j].is_empty() && nq.gl[j] == Vector3::zeros() {
            continue;
        }
        let mut hd = *h;
        for k in 0..3 {
            hd[(k, k)] += lambda * hd[(k, k)].max(1e-9);
        }
        let inv = hd.cholesky()?.inverse();
        hll_inv[j] = inv;
        let blocks = &nq.hpl[j];
        for (a, ba) in blocks {
            let bw = ba * inv;
            let mut rows = b.fixed_rows_mut::<6>(6 * a);
            rows += bw * nq.gl[j];
            for (c, bc) in blocks {
                let mut v = s.fixed_view_mut::<6, 6>(6 * a, 6 * c);
                v -= bw * bc.transpose();
            }
        }
    }
    let s = (&s + s.transpose()) * 0.5;
    let dp = s.cholesky()?.solve(&b);
    let dl = (0..nq.hll.len())
        .map(|j| {
            if !usable[j] {
                return Vector3::zeros();
            }
            let mut rhs = -nq.gl[j];
            for (a, ba) in &nq.hpl[j] {
                rhs -= ba.transpose() * dp.fixed_rows::<6>(6 * a);
            }
            hll_inv[j] * rhs
        })
        .collect();
    Some((dp, dl))
}

fn retract(state: &State, dp: &DVector<f64>, dl: &[Vector3<f64>]) -> State {
    State {
        poses: state
            .poses
            .iter()
            .enumerate()
            .map(|(i, t)| (*t * Pose::exp(&dp.fixed_rows::<6>(6 * i).into_owned())).orthonormalized())
            .collect(),
        points: state.points.iter().zip(dl).map(|(p, d)| p + d).collect(),
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Activity flags from the median rule. The threshold never drops below the
/// Huber knee, so residuals in the quadratic zone always stay active.
fn outlier_flags(norms: &[f64], factor: f64, floor: f64) -> Vec<bool> {
    let mut finite: Vec<f64> = norms.iter().copied().filter(|v| v.is_finite()).collect();
    let thr = median(&mut finite).map_or(floor, |m| (factor * m).max(floor));
    norms.iter().map(|&r| r <= thr).collect()
}

/// Levenberg–Marquardt over the whole graph.
pub fn solve(problem: &FactorGraphProblem, params: &SolveParams) -> Result<SolveResult, GraphError> {
    problem.validate()?;
    let ctx = Context::new(problem)?;
    let mut state = State {
        poses: problem.poses.clone(),
        points: problem.landmarks.iter().map(|l| l.position).collect(),
    };
    let all = vec![true; problem.observations.len()];
    let initial_cost = ctx.cost(&state, &all, &ctx.usable(&all))?;
    let mut report = SolveReport {
        iterations: 0,
        accepted_steps: 0,
        outer_iterations: 0,
        segments: Vec::new(),
        initial_cost,
        final_cost: initial_cost,
        deactivated: 0,
        behind_camera: 0,
        termination: Termination::Trivial,
        scale: 1.0,
    };
    let mut active: Option<Vec<bool>> = None;
    let mut lambda = params.lambda_init;
    for outer in 0..params.max_outer.max(1) {
        let flags = if outer == 0 {
            vec![true; problem.observations.len()]
        } else {
            outlier_flags(&ctx.obs_norms(&state)?, params.outlier_factor, problem.huber_delta)
        };
        if active.as_ref() == Some(&flags) {
            break;
        }
        let act = active.insert(flags);
        report.outer_iterations += 1;
        let usable = ctx.usable(act);
        let mut cost = ctx.cost(&state, act, &usable)?;
        let mut segment = vec![cost];
        let mut singular = false;
        loop {
            if report.iterations >= params.max_iter {
                report.termination = Termination::MaxIterations;
                break;
            }
            report.iterations += 1;
            let nq = linearize(&ctx, &state, act, &usable)?;
            report.behind_camera += nq.behind;
            let Some((dp, dl)) = damped_step(&nq, &usable, lambda) else {
                singular = true;
                lambda *= 10.0;
                if lambda > params.lambda_max {
                    return Err(GraphError::Singular { lambda });
                }
                continue;
            };
            let step = (dp.norm_squared() + dl.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
            if step < params.step_tol {
                report.termination = Termination::SmallStep;
                break;
            }
            let trial = retract(&state, &dp, &dl);
            let new_cost = ctx.cost(&trial, act, &usable)?;
            if new_cost < cost {
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                state = trial;
                cost = new_cost;
                segment.push(cost);
                report.accepted_steps += 1;
                lambda = (lambda * 0.1).max(1e-12);
                singular = false;
                if rel < params.rel_tol {
                    report.termination = Termination::RelativeDecrease;
                    break;
                }
            } else {
                lambda *= 10.0;
                if lambda > params.lambda_max {
                    if singular {
                        return Err(GraphError::Singular { lambda });
                    }
                    report.termination = Termination::LambdaLimit;
                    lambda = params.lambda_init;
                    break;
                }
            }
        }
        report.segments.push(segment);
        if report.termination == Termination::MaxIterations {
            break;
        }
    }
    let active = active.unwrap_or_default();
    let usable = ctx.usable(&active);
    if params.metric_scale && !(problem.sigma_anchor.is_some() && problem.landmarks.iter().any(|l| l.anchor.is_some())) {
        if let Some(s) = depth_scale(problem, &state, &active, &usable) {
            let c0 = state.poses[0].translation;
            for p in &mut state.poses {
                p.translation = c0 + (p.translation - c0) * s;
            }
            for l in &mut state.points {
                *l = c0 + (*l - c0) * s;
            }
            report.scale = s;
        }
    }
    report.final_cost = ctx.cost(&state, &active, &usable)?;
    report.deactivated = active.iter().filter(|a| !**a).count();
    let landmarks = problem
        .landmarks
        .iter()
        .zip(&state.points)
        .map(|(l, p)| Landmark { position: *p, ..l.clone() })
        .collect();
    Ok(SolveResult {
        poses: state.poses,
        landmarks,
        active,
        report,
    })
}

/// Median of prior depth over estimated depth across active observations.
fn depth_scale(problem: &FactorGraphProblem, state: &State, active: &[bool], usable: &[bool]) -> Option<f64> {
    let mut ratios: Vec<f64> = problem
        .observations
        .iter()
        .zip(active)
        .filter(|(o, a)| **a && usable[o.landmark])
        .filter_map(|(o, _)| {
            let d = o.depth.filter(|d| d.is_finite() && *d > MIN_DEPTH)?;
            let z = state.poses[o.frame].inverse().transform_point(&state.points[o.landmark]).z;
            (z > MIN_DEPTH).then_some(d / z)
        })
        .collect();
    if ratios.len() < 3 {
        return None;
    }
    ratios.sort_by(f64::total_cmp);
    let s = ratios[ratios.len() / 2];
    (s.is_finite() && s > 0.0).then_some(s)
}

// ---------------------------------------------------------------------------
// Landmark selection and association
// ---------------------------------------------------------------------------

/// A world point seen at one pixel of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub frame: usize,
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
    /// Keypoint track the candidate belongs to, if any.
    pub track: Option<u64>,
}

/// Grid-lattice samples of static, confident, valid-depth pixels lifted to
/// the world with each frame's initial pose.
pub fn select_landmarks(frames: &[FrameBundle], masks: &[Mask], conf_min: f64, grid_step: usize) -> Vec<Candidate> {
    assert_eq!(frames.len(), masks.len(), "one mask per frame");
    let step = grid_step.max(1);
    let mut out = Vec::new();
    for (i, (f, m)) in frames.iter().zip(masks).enumerate() {
        let to_world = f.init_pose.inverse();
        let before = out.len();
        for gy in 0..f.height() / step {
            for gx in 0..f.width() / step {
                let (x, y) = (gx * step + step / 2, gy * step + step / 2);
                if *m.get(x, y) || *f.confidence.get(x, y) < conf_min || !f.depth_valid(x, y) {
                    continue;
                }
                let pc = f.intrinsics.ray(x as f64, y as f64) * *f.depth.get(x, y);
                out.push(Candidate {
                    frame: i,
                    pixel: Vector2::new(x as f64, y as f64),
                    point: to_world.transform_point(&pc),
                    track: None,
                });
            }
        }
        if out.len() == before {
            log::warn!("frame {} has no landmark candidates", f.frame_id);
        }
    }
    out
}

/// Candidates from keypoint matches, chained into tracks. A match of pair
/// `(t, t−1)` continues an existing track when its frame-`t−1` pixel lies
/// within `link_px` of a keypoint already tracked in frame `t−1`.
pub fn track_candidates(frames: &[FrameBundle], masks: &[Mask], conf_min: f64, link_px: f64) -> Vec<Candidate> {
    assert_eq!(frames.len(), masks.len(), "one mask per frame");
    let usable = |i: usize, px: &Vector2<f64>| -> Option<Vector3<f64>> {
        let f = &frames[i];
        let (x, y) = (px.x.round(), px.y.round());
        if x < 0.0 || y < 0.0 || x as usize >= f.width() || y as usize >= f.height() {
            return None;
        }
        let (x, y) = (x as usize, y as usize);
        if *masks[i].get(x, y) || *f.confidence.get(x, y) < conf_min {
            return None;
        }
        let d = sample_depth(&f.depth, px)?;
        Some(f.init_pose.inverse().transform_point(&(f.intrinsics.ray(px.x, px.y) * d)))
    };
    let mut out = Vec::new();
    let mut next_track = 0u64;
    // Keypoints of the previous frame: (pixel, track).
    let mut prev_keys: Vec<(Vector2<f64>, u64)> = Vec::new();
    for t in 1..frames.len() {
        let mut cur_keys = Vec::new();
        let Some(matches) = &frames[t].matches_prev else {
            prev_keys.clear();
            continue;
        };
        for m in matches {
            let (Some(pt), Some(pp)) = (usable(t, &m.pixel_t), usable(t - 1, &m.pixel_t2)) else {
                continue;
            };
            let linked = prev_keys
                .iter()
                .filter(|(px, _)| (px - m.pixel_t2).norm() <= link_px)
                .min_by(|a, b| (a.0 - m.pixel_t2).norm().total_cmp(&(b.0 - m.pixel_t2).norm()))
                .map(|(_, id)| *id);
            let track = match linked {
                Some(id) => id,
                None => {
                    let id = next_track;
                    next_track += 1;
                    out.push(Candidate {
                        frame: t - 1,
                        pixel: m.pixel_t2,
                        point: pp,
                        track: Some(id),
                    });
                    id
                }
            };
            out.push(Candidate {
                frame: t,
                pixel: m.pixel_t,
                point: pt,
                track: Some(track),
            });
            cur_keys.push((m.pixel_t, track));
        }
        prev_keys = cur_keys;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    pub tau_min: f64,
    pub alpha_assoc: f64,
    pub d_scene: f64,
}

impl AssociationConfig {
    pub fn tau_dist(&self) -> f64 {
        self.tau_min.max(self.d_scene * self.alpha_assoc)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if !(self.tau_min > 0.0) || !(self.alpha_assoc > 0.0 && self.alpha_assoc < 1.0) || !(self.d_scene >= 0.0) {
            return Err(GraphError::Invalid(format!("bad association config {self:?}")));
        }
        Ok(())
    }
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            tau_min: 0.02,
            alpha_assoc: 0.005,
            d_scene: 0.0,
        }
    }
}

/// Poses and cameras used by the reprojection gate.
pub struct AssociationGate<'a> {
    /// World→camera extrinsics per frame.
    pub extrinsics: &'a [Pose],
    pub intrinsics: &'a [Intrinsics],
    /// Gate radius is `2 · huber_delta` pixels.
    pub huber_delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    pub landmarks: Vec<Landmark>,
    pub observations: Vec<Observation>,
}

type Cell = [i64; 3];

fn cell_of(p: &Vector3<f64>, size: f64) -> Cell {
    [(p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64]
}

struct Clusters {
    tau: f64,
    cells: HashMap<Cell, Vec<usize>>,
    sums: Vec<Vector3<f64>>,
    counts: Vec<usize>,
    positions: Vec<Vector3<f64>>,
    /// Observing (frame, pixel) per landmark.
    seen: Vec<Vec<(usize, Vector2<f64>)>>,
}

impl Clusters {
    fn nearest(&self, p: &Vector3<f64>) -> Option<(usize, f64)> {
        let c = cell_of(p, self.tau);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &id in ids {
                        let d = (self.positions[id] - p).norm();
                        if best.is_none_or(|(bi, bd)| d < bd || (d == bd && id < bi)) {
                            best = Some((id, d));
                        }
                    }
                }
            }
        }
        best
    }

    fn spawn(&mut self, p: Vector3<f64>) -> usize {
        let id = self.positions.len();
        self.positions.push(p);
        self.sums.push(p);
        self.counts.push(1);
        self.seen.push(Vec::new());
        self.cells.entry(cell_of(&p, self.tau)).or_default().push(id);
        id
    }

    fn join(&mut self, id: usize, p: &Vector3<f64>) {
        let old = cell_of(&self.positions[id], self.tau);
        self.sums[id] += p;
        self.counts[id] += 1;
        self.positions[id] = self.sums[id] / self.counts[id] as f64;
        let new = cell_of(&self.positions[id], self.tau);
        if new != old {
            if let Some(v) = self.cells.get_mut(&old) {
                v.retain(|&x| x != id);
            }
            self.cells.entry(new).or_default().push(id);
        }
    }
}

/// Greedy clustering of candidates into landmarks.
///
/// An untracked candidate joins its nearest landmark when the two are closer
/// than `τ_dist` and the candidate reprojects within `2·huber_delta` of every
/// observation that landmark already has; otherwise it starts a new
/// landmark. Tracked candidates always join their track's landmark.
/// Landmark positions are the running mean of their members.
pub fn associate_landmarks(
    candidates: &[Candidate],
    cfg: &AssociationConfig,
    gate: &AssociationGate,
    sigma_proj: Matrix2<f64>,
) -> Association {
    let tau = cfg.tau_dist();
    let mut cl = Clusters {
        tau,
        cells: HashMap::new(),
        sums: Vec::new(),
        counts: Vec::new(),
        positions: Vec::new(),
        seen: Vec::new(),
    };
    let mut tracks: HashMap<u64, usize> = HashMap::new();
    let mut observations = Vec::with_capacity(candidates.len());
    let gate_px = 2.0 * gate.huber_delta;
    for c in candidates {
        let id = match c.track {
            Some(t) => match tracks.get(&t) {
                Some(&id) => {
                    cl.join(id, &c.point);
                    id
                }
                None => {
                    let id = cl.spawn(c.point);
                    tracks.insert(t, id);
                    id
                }
            },
            None => {
                let joined = cl.nearest(&c.point).filter(|&(id, d)| {
                    d < tau
                        && cl.seen[id].iter().all(|(f, z)| {
                            let pc = gate.extrinsics[*f].transform_point(&c.point);
                            let pr = gate.intrinsics[*f].project(&pc);
                            !pr.behind && (pr.pixel - z).norm() <= gate_px
                        })
                });
                match joined {
                    Some((id, _)) => {
                        cl.join(id, &c.point);
                        id
                    }
                    None => cl.spawn(c.point),
                }
            }
        };
        cl.seen[id].push((c.frame, c.pixel));
        observations.push(Observation {
            frame: c.frame,
            landmark: id,
            pixel: c.pixel,
            sigma_proj,
            depth: Some(gate.extrinsics[c.frame].transform_point(&c.point).z),
        });
    }
    let landmarks = cl
        .positions
        .iter()
        .enumerate()
        .map(|(id, p)| Landmark {
            id,
            position: *p,
            from_memory: false,
            anchor: None,
        })
        .collect();
    Association { landmarks, observations }
}

impl FactorGraphProblem {
    /// Appends an association's landmarks and observations.
    pub fn add_association(&mut self, a: &Association) {
        let base = self.landmarks.len();
        for l in &a.landmarks {
            self.landmarks.push(Landmark { id: base + l.id, ..l.clone() });
        }
        for o in &a.observations {
            self.observations.push(Observation {
                landmark: base + o.landmark,
                ..o.clone()
            });
        }
    }
}

/// Moves observations onto recalled memory points.
///
/// Stored points are mapped into the current frame with the inverse of the
/// recall alignment. Every fresh landmark within `tau_dist` of a stored
/// point hands its observations to that point, which becomes a memory
/// landmark (`from_memory`, anchored at the stored position) with its
/// observation covariances scaled by `alpha_mem`. Fresh landmarks left
/// without observations are removed. Returns the number of memory landmarks
/// added.
pub fn inject_memory_landmarks(
    problem: &mut FactorGraphProblem,
    recalled: &MemoryMap,
    alignment: &AlignmentResult,
    alpha_mem: f64,
    tau_dist: f64,
) -> Result<usize, GraphError> {
    if !alignment.accepted {
        return Err(GraphError::RejectedAlignment);
    }
    if !(alpha_mem > 0.0 && alpha_mem <= 1.0) {
        return Err(GraphError::Invalid(format!("alpha_mem = {alpha_mem} outside (0, 1]")));
    }
    let to_current = alignment.transform.inverse();
    let stored: Vec<Vector3<f64>> = recalled.cloud.points.iter().map(|p| to_current.transform_point(p)).collect();
    if stored.is_empty() {
        return Ok(0);
    }
    let tree = KdTree::new(&stored);
    let mut target: Vec<Option<usize>> = vec![None; problem.landmarks.len()];
    for (j, l) in problem.landmarks.iter().enumerate() {
        if l.from_memory {
            continue;
        }
        if let Some((k, d2)) = tree.nearest(&l.position) {
            if d2.sqrt() < tau_dist {
                target[j] = Some(k);
            }
        }
    }
    // Build the new landmark list: surviving fresh landmarks keep their
    // order, memory landmarks follow in stored-point order.
    let mut memory_ids: Vec<usize> = target.iter().flatten().copied().collect();
    memory_ids.sort_unstable();
    memory_ids.dedup();
    let mut remap = vec![usize::MAX; problem.landmarks.len()];
    let mut landmarks = Vec::new();
    for (j, l) in problem.landmarks.iter().enumerate() {
        if target[j].is_none() {
            remap[j] = landmarks.len();
            landmarks.push(Landmark { id: landmarks.len(), ..l.clone() });
        }
    }
    let mut mem_index = HashMap::new();
    for k in &memory_ids {
        mem_index.insert(*k, landmarks.len());
        landmarks.push(Landmark {
            id: landmarks.len(),
            position: stored[*k],
            from_memory: true,
            anchor: Some(stored[*k]),
        });
    }
    for o in problem.observations.iter_mut() {
        match target[o.landmark] {
            Some(k) => {
                o.landmark = mem_index[&k];
                o.sigma_proj *= alpha_mem;
            }
            None => o.landmark = remap[o.landmark],
        }
    }
    problem.landmarks = landmarks;
    problem.alpha_mem = alpha_mem;
    Ok(memory_ids.len())
}

// ---------------------------------------------------------------------------
// Trajectory files
// ---------------------------------------------------------------------------

/// Writes camera→world poses as `timestamp tx ty tz qx qy qz qw` lines, with
/// the frame index as timestamp.
pub fn write_tum<W: Write>(mut w: W, poses: &[Pose]) -> std::io::Result<()> {
    for (i, p) in poses.iter().enumerate() {
        let q = p.quaternion();
        let t = p.translation;
        writeln!(
            w,
            "{} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            i, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

pub fn read_tum<R: BufRead>(r: R) -> Result<Vec<Pose>, String> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1)))
            .collect::<Result<_, _>>()?;
        if v.len() != 8 || !v.iter().all(|x| x.is_finite()) {
            return Err(format!("line {}: expected 8 finite numbers", n + 1));
        }
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]));
        out.push(Pose::from_quaternion(q, Vector3::new(v[1], v[2], v[3])));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use crate::icp::IcpResult;
    use crate::membank::MemoryBank;
    use crate::geometry::PointCloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap()
    }

    fn normal3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        })
    }

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        Pose::new(
            so3_exp(&Vector3::from_fn(|_, _| rng.random_range(-rot..rot))),
            Vector3::from_fn(|_, _| rng.random_range(-trans..trans)),
        )
    }

    fn random_xi(rng: &mut ChaCha8Rng, s: f64) -> Vector6<f64> {
        Vector6::from_fn(|_, _| rng.random_range(-s..s))
    }

    /// Cameras on a gentle arc looking along +z at a slab of points.
    struct Toy {
        gt: Vec<Pose>,
        points: Vec<Vector3<f64>>,
    }

    fn toy(seed: u64, frames: usize, points: usize) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = (0..frames)
            .map(|i| {
                let a = 0.03 * i as f64;
                Pose::new(so3_exp(&Vector3::new(0.0, a, 0.0)), Vector3::new(0.25 * i as f64, 0.02 * i as f64, 0.0))
            })
            .collect();
        let points = (0..points)
            .map(|_| Vector3::new(rng.random_range(-1.5..4.0), rng.random_range(-1.5..1.5), rng.random_range(3.0..6.0)))
            .collect();
        Toy { gt, points }
    }

    /// Exact (or noisy) observations of every visible point, landmarks
    /// initialised by lifting the first observation with the initial pose.
    fn problem(t: &Toy, init: &[Pose], pix_noise: f64, seed: u64) -> FactorGraphProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kk = k();
        let mut p = FactorGraphProblem::new(vec![kk; init.len()], init.to_vec());
        for l in &t.points {
            let mut obs = Vec::new();
            for (i, pose) in t.gt.iter().enumerate() {
                let pc = pose.inverse().transform_point(l);
                let pr = kk.project(&pc);
                if !pr.behind && kk.contains(&pr.pixel) {
                    let n = normal3(&mut rng, pix_noise);
                    obs.push((i, pr.pixel + Vector2::new(n.x, n.y), pc.z));
                }
            }
            if obs.len() < 2 {
                continue;
            }
            let (f0, z0, d0) = obs[0];
            let start = init[f0].transform_point(&(kk.ray(z0.x, z0.y) * d0));
            let j = p.add_landmark(start, false);
            for (i, z, _) in obs {
                p.add_observation(i, j, z, Matrix2::identity());
            }
        }
        p
    }

    fn noisy(gt: &[Pose], rot: f64, trans: f64, seed: u64) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gt.iter()
            .map(|p| {
                let n_r = normal3(&mut rng, rot);
                let n_t = normal3(&mut rng, trans);
                Pose::new(p.rotation * so3_exp(&n_r), p.translation + n_t)
            })
            .collect()
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 2.0), (0.0, 1.0));
        assert_eq!(huber(2.0, 2.0), (2.0, 1.0));
        let (c, w) = huber(6.0, 2.0);
        assert!((c - 2.5 * 4.0).abs() < 1e-12 && (w - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn projection_residual_examples() {
        let kk = k();
        let t = Pose::identity();
        let z = Vector2::new(70.0, 40.0);
        let on_ray = kk.ray(z.x, z.y) * 2.0;
        assert!(residual_projection(&t, &on_ray, &kk, &z).unwrap().norm() < 1e-12);
        let off = on_ray + Vector3::new(0.1, 0.0, 0.0);
        let r = residual_projection(&t, &off, &kk, &z).unwrap();
        assert!((r - Vector2::new(5.0, 0.0)).norm() < 1e-12);
        assert!(residual_projection(&t, &Vector3::new(0.0, 0.0, -1.0), &kk, &z).is_none());
        assert!(projection_jacobians(&t, &Vector3::new(0.0, 0.0, -1.0), &kk).is_none());
    }

    #[test]
    fn prior_residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = random_pose(&mut rng, 1.0, 2.0);
        assert_eq!(residual_prior(&init, &init), Vector6::zeros());
        let moved = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let r = residual_prior(&moved, &Pose::identity());
        assert!((r - Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).norm() < 1e-15);
        for _ in 0..100 {
            let xi = random_xi(&mut rng, 0.8);
            let r = residual_prior(&(init * Pose::exp(&xi)), &init);
            assert!((r - xi).norm() < 1e-9);
        }
    }

    #[test]
    fn motion_residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (p0, c0) = (random_pose(&mut rng, 1.0, 2.0), random_pose(&mut rng, 1.0, 2.0));
            assert!(residual_motion(&p0, &c0, &p0, &c0).norm() < 1e-12);
            let (p, c) = (p0 * Pose::exp(&random_xi(&mut rng, 0.2)), c0 * Pose::exp(&random_xi(&mut rng, 0.2)));
            let g = random_pose(&mut rng, 2.0, 5.0);
            let r = residual_motion(&p, &c, &p0, &c0);
            let rg = residual_motion(&(g * p), &(g * c), &(g * p0), &(g * c0));
            assert!((r - rg).norm() < 1e-9);
            assert!(residual_motion(&(g * p0), &(g * c0), &p0, &c0).norm() < 1e-9);
            // A small perturbation of the current pose shows up to first
            // order; its central difference matches exactly.
            let xi = random_xi(&mut rng, 1e-4);
            let plus = residual_motion(&p0, &(c0 * Pose::exp(&xi)), &p0, &c0);
            let minus = residual_motion(&p0, &(c0 * Pose::exp(&-xi)), &p0, &c0);
            assert!(((plus - minus) * 0.5 - xi).norm() < 1e-12);
        }
    }

    fn rel_err<const R: usize, const C: usize>(a: &SMatrix<f64, R, C>, b: &SMatrix<f64, R, C>) -> f64 {
        (a - b).norm() / b.norm().max(1.0)
    }

    fn fd<const R: usize, const C: usize>(f: impl Fn(&SMatrix<f64, C, 1>) -> SMatrix<f64, R, 1>) -> SMatrix<f64, R, C> {
        let h = 1e-6;
        let mut j = SMatrix::<f64, R, C>::zeros();
        for c in 0..C {
            let mut d = SMatrix::<f64, C, 1>::zeros();
            d[c] = h;
            j.set_column(c, &((f(&d) - f(&-d)) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kk = k();
        for _ in 0..100 {
            // Projection.
            let t = random_pose(&mut rng, 1.0, 1.0);
            let l = t.transform_point(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..8.0)));
            let z = Vector2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..96.0));
            let (jt, jl) = projection_jacobians(&t, &l, &kk).unwrap();
            let nt = fd::<2, 6>(|d| residual_projection(&(t * Pose::exp(d)), &l, &kk, &z).unwrap());
            let nl = fd::<2, 3>(|d| residual_projection(&t, &(l + d), &kk, &z).unwrap());
            assert!(rel_err(&jt, &nt) < 1e-5, "{jt} {nt}");
            assert!(rel_err(&jl, &nl) < 1e-5);

            // Prior.
            let init = random_pose(&mut rng, 2.0, 3.0);
            let t0 = init * Pose::exp(&random_xi(&mut rng, 0.7));
            let jp = prior_jacobian(&t0, &init);
            let np = fd::<6, 6>(|d| residual_prior(&(t0 * Pose::exp(d)), &init));
            assert!(rel_err(&jp, &np) < 1e-5);

            // Motion.
            let (p0, c0) = (random_pose(&mut rng, 2.0, 3.0), random_pose(&mut rng, 2.0, 3.0));
            let (p, c) = (p0 * Pose::exp(&random_xi(&mut rng, 0.5)), c0 * Pose::exp(&random_xi(&mut rng, 0.5)));
            let (jmp, jmc) = motion_jacobians(&p, &c, &p0, &c0);
            let nmp = fd::<6, 6>(|d| residual_motion(&(p * Pose::exp(d)), &c, &p0, &c0));
            let nmc = fd::<6, 6>(|d| residual_motion(&p, &(c * Pose::exp(d)), &p0, &c0));
            assert!(rel_err(&jmp, &nmp) < 1e-5);
            assert!(rel_err(&jmc, &nmc) < 1e-5);
        }
    }

    #[test]
    fn prior_only_converges_to_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let init = random_pose(&mut rng, 1.0, 2.0);
        let mut p = FactorGraphProblem::new(vec![k()], vec![init]);
        p.poses[0] = init * Pose::exp(&random_xi(&mut rng, 0.3));
        let r = solve(&p, &SolveParams::default()).unwrap();
        assert!(Pose::diff(&init, &r.poses[0]).norm() < 1e-8);
        assert!(r.report.monotone());
    }

    #[test]
    fn exact_init_is_a_fixed_point() {
        let t = toy(7, 10, 150);
        let p = problem(&t, &t.gt, 0.0, 0);
        let r = solve(&p, &SolveParams::default()).unwrap();
        for (a, b) in r.poses.iter().zip(&t.gt) {
            assert!(Pose::diff(b, a).norm() < 1e-6);
        }
        assert!(r.report.final_cost < 1e-12);
    }

    #[test]
    fn depth_priors_restore_metric_scale() {
        let t = toy(12, 8, 150);
        let mut p = problem(&t, &t.gt, 0.0, 0);
        for o in &mut p.observations {
            o.depth = Some(p.poses[o.frame].inverse().transform_point(&p.landmarks[o.landmark].position).z);
        }
        let half = |q: &Pose| Pose::new(q.rotation, q.translation * 0.5);
        p.poses = p.poses.iter().map(half).collect();
        p.init_poses = p.init_poses.iter().map(half).collect();
        for l in &mut p.landmarks {
            l.position *= 0.5;
        }
        let r = solve(&p, &SolveParams::default()).unwrap();
        assert!((r.report.scale - 2.0).abs() < 1e-6, "{}", r.report.scale);
        for (a, b) in r.poses.iter().zip(&t.gt) {
            assert!(Pose::diff(b, a).norm() < 1e-6);
        }
        let off = solve(&p, &SolveParams { metric_scale: false, ..Default::default() }).unwrap();
        assert_eq!(off.report.scale, 1.0);
        assert!((off.poses[3].translation - p.poses[3].translation).norm() < 1e-6);
    }

    #[test]
    fn refines_noisy_trajectory_and_keeps_anchor() {
        let t = toy(8, 12, 300);
        let init = noisy(&t.gt, 0.5f64.to_radians(), 0.01, 8);
        // Keep the first pose exact so that ground truth and anchor agree.
        let mut init = init;
        init[0] = t.gt[0];
        let p = problem(&t, &init, 0.0, 8);
        let r = solve(&p, &SolveParams::default()).unwrap();
        assert!(r.report.monotone());
        assert!(r.report.final_cost < r.report.initial_cost);
        assert!(Pose::diff(&init[0], &r.poses[0]).norm() < 1e-6);
        for q in &r.poses {
            assert!(q.is_valid(1e-9));
        }
        let err = |ps: &[Pose]| ps.iter().zip(&t.gt).map(|(a, b)| (a.translation - b.translation).norm()).sum::<f64>();
        assert!(err(&r.poses) < 0.5 * err(&init), "{} vs {}", err(&r.poses), err(&init));
    }

    #[test]
    fn cost_is_gauge_invariant_without_prior() {
        let t = toy(9, 6, 80);
        let init = noisy(&t.gt, 0.02, 0.05, 9);
        let mut p = problem(&t, &init, 0.5, 9);
        p.use_prior = false;
        let c = p.cost().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_pose(&mut rng, 2.0, 4.0);
        let mut q = p.clone();
        for pose in q.poses.iter_mut().chain(q.init_poses.iter_mut()) {
            *pose = g * *pose;
        }
        for l in q.landmarks.iter_mut() {
            l.position = g.transform_point(&l.position);
        }
        assert!((q.cost().unwrap() - c).abs() < 1e-8 * c.max(1.0));
        p.use_prior = true;
        q.use_prior = true;
        q.init_poses[0] = p.init_poses[0];
        assert!(q.cost().unwrap() > c + 1.0);
    }

    #[test]
    fn gross_outliers_are_deactivated() {
        let t = toy(10, 8, 200);
        let mut p = problem(&t, &t.gt, 0.3, 10);
        for o in p.observations.iter_mut().step_by(25) {
            o.pixel += Vector2::new(40.0, -30.0);
        }
        let r = solve(&p, &SolveParams::default()).unwrap();
        for (o, ob) in p.observations.iter().enumerate() {
            if o % 25 == 0 {
                assert!(!r.active[o], "outlier {o} still active");
            }
            let _ = ob;
        }
        for (a, b) in r.poses.iter().zip(&t.gt) {
            assert!((a.translation - b.translation).norm() < 0.02);
        }
    }

    #[test]
    fn nan_residual_names_factor() {
        let t = toy(11, 3, 20);
        let mut p = problem(&t, &t.gt, 0.0, 0);
        p.observations[0].pixel.x = f64::NAN;
        let err = p.cost().unwrap_err();
        assert!(matches!(err, GraphError::NonFinite { ref factor } if factor.starts_with("projection")), "{err}");
    }

    #[test]
    fn invalid_graphs_are_rejected() {
        let t = toy(12, 3, 20);
        let mut p = problem(&t, &t.gt, 0.0, 0);
        p.observations[0].landmark = 10_000;
        assert!(matches!(p.validate(), Err(GraphError::Invalid(_))));
        let mut p = problem(&t, &t.gt, 0.0, 0);
        p.observations[0].sigma_proj = Matrix2::new(1.0, 2.0, 2.0, 1.0);
        assert!(matches!(solve(&p, &SolveParams::default()), Err(GraphError::Invalid(_))));
        let empty = FactorGraphProblem::new(vec![], vec![]);
        assert!(empty.validate().is_err());
    }

    fn assoc_cfg(tau: f64) -> AssociationConfig {
        AssociationConfig {
            tau_min: tau,
            alpha_assoc: 0.001,
            d_scene: 1.0,
        }
    }

    #[test]
    fn tau_dist_formula() {
        let c = AssociationConfig {
            tau_min: 0.05,
            alpha_assoc: 0.01,
            d_scene: 10.0,
        };
        assert!((c.tau_dist() - 0.1).abs() < 1e-15);
        assert_eq!(assoc_cfg(0.3).tau_dist(), 0.3);
    }

    #[test]
    fn nearby_candidates_share_a_landmark() {
        let kk = k();
        let ext = [Pose::identity(), Pose::from_translation(Vector3::new(-0.05, 0.0, 0.0))];
        let ks = [kk, kk];
        let gate = AssociationGate {
            extrinsics: &ext,
            intrinsics: &ks,
            huber_delta: 2.0,
        };
        let a = Vector3::new(0.0, 0.0, 4.0);
        let b = a + Vector3::new(0.05, 0.0, 0.0);
        let cand = |frame: usize, p: Vector3<f64>| Candidate {
            frame,
            pixel: kk.project(&ext[frame].transform_point(&p)).pixel,
            point: p,
            track: None,
        };
        let cfg = AssociationConfig {
            tau_min: 0.1,
            alpha_assoc: 0.01,
            d_scene: 1.0,
        };
        let r = associate_landmarks(&[cand(0, a), cand(1, b)], &cfg, &gate, Matrix2::identity());
        assert_eq!(r.landmarks.len(), 1);
        assert_eq!(r.observations.len(), 2);
        assert!((r.landmarks[0].position - (a + b) * 0.5).norm() < 1e-12);
        // At 1 m the same 5 cm offset reprojects 5 px away from the first
        // observation, beyond the 4 px gate.
        let (a1, b1) = (Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.05, 0.0, 1.0));
        let r = associate_landmarks(&[cand(0, a1), cand(1, b1)], &cfg, &gate, Matrix2::identity());
        assert_eq!(r.landmarks.len(), 2);
    }

    fn union_find_clusters(points: &[Vector3<f64>], tau: f64) -> Vec<usize> {
        let n = points.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for i in 0..n {
            for j in 0..i {
                if (points[i] - points[j]).norm() < tau {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..n).map(|i| find(&mut parent, i)).collect()
    }

    #[test]
    fn association_matches_union_find_under_exact_poses() {
        let t = toy(13, 8, 200);
        let kk = k();
        let ext: Vec<Pose> = t.gt.iter().map(Pose::inverse).collect();
        let ks = vec![kk; ext.len()];
        let mut cands = Vec::new();
        for (f, e) in ext.iter().enumerate() {
            for p in &t.points {
                let pr = kk.project(&e.transform_point(p));
                if !pr.behind && kk.contains(&pr.pixel) {
                    // Lifting with exact depth reproduces the point up to
                    // rounding.
                    let depth = e.transform_point(p).z;
                    let lifted = e.inverse().transform_point(&(kk.ray(pr.pixel.x, pr.pixel.y) * depth));
                    cands.push(Candidate {
                        frame: f,
                        pixel: pr.pixel,
                        point: lifted,
                        track: None,
                    });
                }
            }
        }
        let tau = 0.05;
        let gate = AssociationGate {
            extrinsics: &ext,
            intrinsics: &ks,
            huber_delta: 2.0,
        };
        let a = associate_landmarks(&cands, &assoc_cfg(tau), &gate, Matrix2::identity());
        let pts: Vec<Vector3<f64>> = cands.iter().map(|c| c.point).collect();
        let uf = union_find_clusters(&pts, tau);
        for i in 0..cands.len() {
            for j in 0..i {
                let same_a = a.observations[i].landmark == a.observations[j].landmark;
                assert_eq!(same_a, uf[i] == uf[j], "candidates {i} and {j}");
            }
        }
    }

    #[test]
    fn tracked_candidates_follow_their_track() {
        let kk = k();
        let ext = [Pose::identity(), Pose::identity()];
        let ks = [kk, kk];
        let gate = AssociationGate {
            extrinsics: &ext,
            intrinsics: &ks,
            huber_delta: 2.0,
        };
        let c = |frame, x: f64, track| Candidate {
            frame,
            pixel: Vector2::new(50.0, 50.0),
            point: Vector3::new(x, 0.0, 3.0),
            track,
        };
        let r = associate_landmarks(
            &[c(0, 0.0, Some(1)), c(1, 0.5, Some(1)), c(1, 0.001, None)],
            &assoc_cfg(0.02),
            &gate,
            Matrix2::identity(),
        );
        assert_eq!(r.observations[0].landmark, r.observations[1].landmark);
        assert_eq!(r.landmarks.len(), 2);
    }

    fn bundle(depth: f64, conf: f64) -> FrameBundle {
        FrameBundle {
            frame_id: 0,
            intrinsics: k(),
            init_pose: Pose::identity(),
            depth: crate::grid::Grid::from_fn(128, 96, |x, _| if x == 4 { 0.0 } else { depth }),
            confidence: crate::grid::Grid::filled(128, 96, conf),
            flow_prev: None,
            visual_feat: None,
            matches_prev: None,
        }
    }

    #[test]
    fn selection_examples() {
        let f = bundle(3.0, 1.0);
        let stat = Mask::filled(128, 96, false);
        let dynm = Mask::filled(128, 96, true);
        let step = 8;
        let c = select_landmarks(&[f.clone(), f.clone()], &[stat.clone(), dynm.clone()], 0.5, step);
        // Column 4 is invalid and sits on the lattice (x = 4 + 8k).
        let expected = (96 / step) * (128 / step) - 96 / step;
        assert_eq!(c.len(), expected);
        assert!(c.iter().all(|c| c.frame == 0 && (c.point.z - 3.0).abs() < 1e-12));
        assert!(select_landmarks(&[f], &[stat], 1.1, step).is_empty());
    }

    fn memory_map(points: Vec<Vector3<f64>>) -> MemoryMap {
        let mut bank = MemoryBank::new();
        let id = bank.create_map(&PointCloud::uniform(points), Vec::new(), None, 0.01).unwrap();
        bank.map(id).unwrap().clone()
    }

    fn accepted(transform: Pose) -> AlignmentResult {
        IcpResult {
            transform,
            inlier_count: 100,
            rmse: 0.0,
            iterations: 1,
            converged: true,
            accepted: true,
        }
    }

    #[test]
    fn memory_injection_examples() {
        let t = toy(14, 6, 60);
        let base = problem(&t, &t.gt, 0.0, 0);
        let map = memory_map(t.points.clone());

        let mut p = base.clone();
        let n = inject_memory_landmarks(&mut p, &map, &accepted(Pose::identity()), 0.25, 0.05).unwrap();
        assert_eq!(n, base.landmarks.len());
        p.validate().unwrap();
        for l in &p.landmarks {
            assert!(l.from_memory);
            let stored = map.cloud.points.iter().any(|q| (q - l.position).norm() == 0.0);
            assert!(stored);
        }
        assert!(p.observations.iter().all(|o| (o.sigma_proj - Matrix2::identity() * 0.25).norm() < 1e-15));

        let mut q = base.clone();
        inject_memory_landmarks(&mut q, &map, &accepted(Pose::identity()), 1.0, 0.05).unwrap();
        assert!(q.observations.iter().all(|o| o.sigma_proj == Matrix2::identity()));

        // Alignment maps current → map, so stored points move by its inverse.
        let g = Pose::from_translation(Vector3::new(0.02, 0.0, 0.0));
        let mut s = base.clone();
        inject_memory_landmarks(&mut s, &map, &accepted(g), 0.25, 0.05).unwrap();
        let moved = s.landmarks.iter().all(|l| t.points.iter().any(|q| (q - Vector3::new(0.02, 0.0, 0.0) - l.position).norm() < 1e-6));
        assert!(moved);

        let mut rej = accepted(Pose::identity());
        rej.accepted = false;
        let mut r = base.clone();
        assert_eq!(inject_memory_landmarks(&mut r, &map, &rej, 0.25, 0.05), Err(GraphError::RejectedAlignment));
        assert_eq!(r, base);
    }

    #[test]
    fn lower_alpha_mem_fits_memory_landmarks_tighter() {
        let t = toy(15, 8, 200);
        let init = noisy(&t.gt, 0.3f64.to_radians(), 0.01, 15);
        let base = problem(&t, &init, 0.5, 15);
        // Stored geometry slightly off, as after a real alignment.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let half: Vec<Vector3<f64>> = t.points.iter().step_by(2).map(|p| p + normal3(&mut rng, 0.01)).collect();
        let map = memory_map(half);
        let mut last = f64::INFINITY;
        for alpha in [1.0, 0.5, 0.25, 0.1] {
            let mut p = base.clone();
            inject_memory_landmarks(&mut p, &map, &accepted(Pose::identity()), alpha, 0.05).unwrap();
            let r = solve(&p, &SolveParams::default()).unwrap();
            let rmse = r.reprojection_rmse(&p, true);
            assert!(rmse <= last + 1e-9, "alpha {alpha}: {rmse} > {last}");
            last = rmse;
        }
    }

    #[test]
    fn tum_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let poses: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng, 2.0, 3.0)).collect();
        let mut buf = Vec::new();
        write_tum(&mut buf, &poses).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with("0 "));
        let back = read_tum(&buf[..]).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!(Pose::diff(a, b).norm() < 1e-12);
        }
        assert!(read_tum(&b"0 1 2 3\n"[..]).is_err());
    }
}
