//! Deterministic synthetic scenes with exact ground truth.
//!
//! A scene is an axis-aligned room (seen from inside), a few static boxes
//! along the walls and optional box-shaped movers. The camera orbits the
//! room centre looking inwards. Everything is ray cast analytically, so
//! depth, flow, masks and keypoint correspondences are exact before noise
//! is added.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{so3_exp, DepthMap, FlowField, Intrinsics, PointCloud, Pose};
use crate::grid::{Grid, Mask};
use crate::membank::{FeatureVec, VISUAL_DIM};
use crate::motioncue::KeypointMatch;
use crate::par;
use crate::pipeline::FrameBundle;

pub use crate::membank::geo_feature as toy_geo_feature;

const NOISE_SALT: u64 = 0x6e6f_6973_6521;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("camera is inside scene geometry at frame {frame}")]
    CameraInsideGeometry { frame: usize },
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Relative depth noise σ (depth × (1 + N(0, σ))).
    pub depth_rel: f64,
    /// Per-axis rotation noise σ (radians), applied to the extrinsic.
    pub rot: f64,
    /// Per-axis translation noise σ (m), applied to the extrinsic.
    pub trans: f64,
    /// Per-component flow noise σ (px).
    pub flow: f64,
    /// Per-component keypoint noise σ (px).
    pub keypoint: f64,
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig {
        depth_rel: 0.0,
        rot: 0.0,
        trans: 0.0,
        flow: 0.0,
        keypoint: 0.0,
    };
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::NONE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub focal: f64,
    pub movers: usize,
    /// Mover edge length range (m).
    pub mover_size: (f64, f64),
    /// Mover speed range (m/frame).
    pub mover_speed: (f64, f64),
    pub static_boxes: (usize, usize),
    /// Total orbit angle of the camera over the sequence (radians).
    pub orbit_arc: f64,
    /// Added to the seeded orbit start angle (radians). The static scene
    /// depends only on the seed, so an offset gives a revisit of the same
    /// room from another arc.
    #[serde(default)]
    pub orbit_offset: f64,
    pub static_features: usize,
    pub features_per_mover: usize,
    pub noise: NoiseConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 128,
            height: 96,
            frames: 30,
            focal: 100.0,
            movers: 1,
            mover_size: (0.8, 1.1),
            mover_speed: (0.12, 0.18),
            static_boxes: (2, 5),
            orbit_arc: 0.9,
            orbit_offset: 0.0,
            static_features: 600,
            features_per_mover: 120,
            noise: NoiseConfig::NONE,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) * 0.5,
            (self.height as f64 - 1.0) * 0.5,
            self.width,
            self.height,
        )
        .expect("positive focal and size")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Aabb {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] > self.lo[a] && p[a] < self.hi[a])
    }

    pub fn diagonal(&self) -> f64 {
        (self.hi - self.lo).norm()
    }

    fn area(&self, face: usize) -> f64 {
        let e = self.hi - self.lo;
        let a = face / 2;
        e[(a + 1) % 3] * e[(a + 2) % 3]
    }

    /// Entry (`outside = true`) or exit parameter of the ray, and the face
    /// hit as `2 * axis + (max side)`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, outside: bool) -> Option<(f64, usize)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut f_near = 0;
        let mut f_far = 0;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < self.lo[a] || o[a] > self.hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (t0, t1) = ((self.lo[a] - o[a]) * inv, (self.hi[a] - o[a]) * inv);
            let (tn, fnear, tf, ffar) = if t0 < t1 { (t0, 2 * a, t1, 2 * a + 1) } else { (t1, 2 * a + 1, t0, 2 * a) };
            if tn > t_near {
                t_near = tn;
                f_near = fnear;
            }
            if tf < t_far {
                t_far = tf;
                f_far = ffar;
            }
        }
        if t_near > t_far {
            return None;
        }
        if outside {
            (t_near > 1e-9).then_some((t_near, f_near))
        } else {
            (t_far > 1e-9).then_some((t_far, f_far))
        }
    }
}

fn face_normal(face: usize) -> Vector3<f64> {
    let mut n = Vector3::zeros();
    n[face / 2] = if face % 2 == 1 { 1.0 } else { -1.0 };
    n
}

/// Face-local 2-D coordinates of a point on an axis-aligned face.
fn face_uv(face: usize, p: &Vector3<f64>) -> Vector2<f64> {
    let a = face / 2;
    Vector2::new(p[(a + 1) % 3], p[(a + 2) % 3])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Body {
    Room,
    Box(usize),
    Mover(usize),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Texture {
    base: f64,
    contrast: f64,
    scale: f64,
    noise_scale: f64,
    noise_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mover {
    /// Box half extents in the object frame.
    pub half: Vector3<f64>,
    /// Object-to-world pose per frame.
    pub poses: Vec<Pose>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub body: Body,
    /// Object-frame coordinates for movers, world coordinates otherwise.
    pub local: Vector3<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub room: Aabb,
    pub boxes: Vec<Aabb>,
    pub movers: Vec<Mover>,
    textures: Vec<[Texture; 6]>,
    pub features: Vec<FeaturePoint>,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub body: Body,
    pub face: usize,
    /// Hit point in body coordinates (world for static bodies).
    pub local: Vector3<f64>,
    pub normal_world: Vector3<f64>,
}

impl Scene {
    fn texture_index(&self, body: Body) -> usize {
        match body {
            Body::Room => 0,
            Body::Box(i) => 1 + i,
            Body::Mover(i) => 1 + self.boxes.len() + i,
        }
    }

    pub fn diameter(&self) -> f64 {
        self.room.diagonal()
    }

    pub fn mover_box(&self, i: usize) -> Aabb {
        Aabb {
            lo: -self.movers[i].half,
            hi: self.movers[i].half,
        }
    }

    /// Nearest surface along `o + t d` at frame `frame`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>, frame: usize) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |h: Hit| {
            if best.is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        };
        if let Some((t, face)) = self.room.intersect(o, d, false) {
            consider(Hit {
                t,
                body: Body::Room,
                face,
                local: o + d * t,
                normal_world: -face_normal(face),
            });
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some((t, face)) = b.intersect(o, d, true) {
                consider(Hit {
                    t,
                    body: Body::Box(i),
                    face,
                    local: o + d * t,
                    normal_world: face_normal(face),
                });
            }
        }
        for (i, m) in self.movers.iter().enumerate() {
            let pose = &m.poses[frame];
            let inv = pose.inverse();
            let ol = inv.transform_point(o);
            let dl = inv.rotation * d;
            if let Some((t, face)) = self.mover_box(i).intersect(&ol, &dl, true) {
                consider(Hit {
                    t,
                    body: Body::Mover(i),
                    face,
                    local: ol + dl * t,
                    normal_world: pose.rotation * face_normal(face),
                });
            }
        }
        best
    }

    fn luminance(&self, hit: &Hit) -> f64 {
        let tex = &self.textures[self.texture_index(hit.body)][hit.face];
        let uv = face_uv(hit.face, &hit.local);
        let cu = (uv.x / tex.scale).floor() as i64;
        let cv = (uv.y / tex.scale).floor() as i64;
        let checker = if (cu + cv).rem_euclid(2) == 0 { 0.5 } else { -0.5 };
        let n = value_noise(uv / tex.noise_scale, tex.noise_seed) - 0.5;
        (tex.base + tex.contrast * checker + 0.25 * n).clamp(0.0, 1.0)
    }

    /// World position of a feature point at a frame.
    pub fn feature_world(&self, f: &FeaturePoint, frame: usize) -> Vector3<f64> {
        match f.body {
            Body::Mover(i) => self.movers[i].poses[frame].transform_point(&f.local),
            _ => f.local,
        }
    }

    pub fn body_pose(&self, body: Body, frame: usize) -> Pose {
        match body {
            Body::Mover(i) => self.movers[i].poses[frame],
            _ => Pose::identity(),
        }
    }
}

fn hash64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = hash64(seed ^ hash64((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in [0, 1].
fn value_noise(p: Vector2<f64>, seed: u64) -> f64 {
    let (x0, y0) = (p.x.floor(), p.y.floor());
    let (fx, fy) = (p.x - x0, p.y - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(ix, iy, seed);
    let b = lattice(ix + 1, iy, seed);
    let c = lattice(ix, iy + 1, seed);
    let d = lattice(ix + 1, iy + 1, seed);
    a * (1.0 - sx) * (1.0 - sy) + b * sx * (1.0 - sy) + c * (1.0 - sx) * sy + d * sx * sy
}

/// Camera extrinsic (world→camera) at `eye` looking at `target`, z-up world.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let up = Vector3::z();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let r_cw = Matrix3::from_columns(&[x, y, z]);
    Pose::new(r_cw, *eye).inverse()
}

/// Ground truth and noisy priors for one frame.
#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub image: Grid<f64>,
    pub gt_depth: DepthMap,
    pub gt_pose: Pose,
    /// Flow from this frame to the previous one (`None` for frame 0).
    pub gt_flow: Option<FlowField>,
    pub gt_mask: Mask,
    pub depth: DepthMap,
    pub confidence: Grid<f64>,
    pub pose: Pose,
    pub flow: Option<FlowField>,
    /// Matches from this frame (`pixel_t`) to the previous one.
    pub matches: Vec<KeypointMatch>,
    /// Feature-point id of every match, for tracking.
    pub match_ids: Vec<usize>,
    pub visual_feat: FeatureVec,
}

#[derive(Clone, Debug)]
pub struct SynthSequence {
    pub config: SceneConfig,
    pub intrinsics: Intrinsics,
    pub scene: Scene,
    pub frames: Vec<SynthFrame>,
}

impl SynthSequence {
    pub fn gt_poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.gt_pose).collect()
    }

    pub fn init_poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    /// Replaces the initial extrinsics with freshly perturbed ground truth:
    /// `R ← exp(n_R)·R`, `t ← t + n_t`, with per-axis σ.
    pub fn perturb_poses(&mut self, rot_sigma: f64, trans_sigma: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT.rotate_left(17));
        for f in &mut self.frames {
            f.pose = perturb_extrinsic(&f.gt_pose, rot_sigma, trans_sigma, &mut rng);
        }
    }

    /// Noisy priors as pipeline frame bundles.
    pub fn bundles(&self) -> Vec<FrameBundle> {
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| FrameBundle {
                frame_id: i as u64,
                intrinsics: self.intrinsics,
                init_pose: f.pose,
                depth: f.depth.clone(),
                confidence: f.confidence.clone(),
                flow_prev: f.flow.clone(),
                visual_feat: Some(f.visual_feat.clone()),
                matches_prev: (i > 0).then(|| f.matches.clone()),
            })
            .collect()
    }

    pub fn gt_masks(&self) -> Vec<Mask> {
        self.frames.iter().map(|f| f.gt_mask.clone()).collect()
    }

    /// World points of every static pixel of `frame` (exact depth and pose).
    pub fn gt_static_cloud(&self, frame: usize, step: usize) -> PointCloud {
        let f = &self.frames[frame];
        let inv = f.gt_pose.inverse();
        let mut c = PointCloud::default();
        for y in (0..self.intrinsics.height).step_by(step.max(1)) {
            for x in (0..self.intrinsics.width).step_by(step.max(1)) {
                if !*f.gt_mask.get(x, y) {
                    let p = self.intrinsics.ray(x as f64, y as f64) * *f.gt_depth.get(x, y);
                    c.push(inv.transform_point(&p), 1.0);
                }
            }
        }
        c
    }
}

fn build_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<(Scene, Vec<Pose>), SynthError> {
    if cfg.frames == 0 || cfg.width < 16 || cfg.height < 16 {
        return Err(SynthError::InvalidConfig("need >= 1 frame and >= 16x16 pixels".into()));
    }
    let w = rng.random_range(6.5..8.5);
    let dd = rng.random_range(6.5..8.5);
    let h = rng.random_range(2.6..3.4);
    let room = Aabb {
        lo: Vector3::new(-w / 2.0, -dd / 2.0, 0.0),
        hi: Vector3::new(w / 2.0, dd / 2.0, h),
    };
    let ring = w.min(dd) / 2.0 - 1.4;

    // Static boxes hug the walls, outside the camera ring.
    let nboxes = rng.random_range(cfg.static_boxes.0..=cfg.static_boxes.1.max(cfg.static_boxes.0));
    let mut boxes = Vec::new();
    for _ in 0..nboxes {
        let sx = rng.random_range(0.4..1.2);
        let sy = rng.random_range(0.4..0.8);
        let sz = rng.random_range(0.5..1.8);
        let wall = rng.random_range(0..4);
        let along = rng.random_range(-0.5..0.5);
        let gap = rng.random_range(0.05..0.2);
        let (cx, cy, ex, ey) = match wall {
            0 => (along * (w - sx), -dd / 2.0 + gap + sy / 2.0, sx, sy),
            1 => (along * (w - sx), dd / 2.0 - gap - sy / 2.0, sx, sy),
            2 => (-w / 2.0 + gap + sy / 2.0, along * (dd - sx), sy, sx),
            _ => (w / 2.0 - gap - sy / 2.0, along * (dd - sx), sy, sx),
        };
        boxes.push(Aabb {
            lo: Vector3::new(cx - ex / 2.0, cy - ey / 2.0, 0.0),
            hi: Vector3::new(cx + ex / 2.0, cy + ey / 2.0, sz),
        });
    }

    // Camera orbit.
    let start = rng.random_range(0.0..std::f64::consts::TAU) + cfg.orbit_offset;
    let cam_h = rng.random_range(1.3..1.7);
    let target = Vector3::new(0.0, 0.0, 0.6);
    let poses: Vec<Pose> = (0..cfg.frames)
        .map(|f| {
            let s = if cfg.frames > 1 { f as f64 / (cfg.frames - 1) as f64 } else { 0.0 };
            let a = start + cfg.orbit_arc * s;
            let eye = Vector3::new(ring * a.cos(), ring * a.sin(), cam_h + 0.1 * (3.0 * a).sin());
            look_at(&eye, &target)
        })
        .collect();

    // Movers: back-and-forth at constant speed across the room centre,
    // perpendicular to the mean viewing direction, spinning slowly.
    let mid = start + cfg.orbit_arc * 0.5;
    let view = Vector3::new(-mid.cos(), -mid.sin(), 0.0);
    let lateral = Vector3::new(-view.y, view.x, 0.0);
    let mut movers = Vec::new();
    for m in 0..cfg.movers {
        let size = rng.random_range(cfg.mover_size.0..=cfg.mover_size.1);
        let half = Vector3::new(size / 2.0, size * rng.random_range(0.35..0.5), size * rng.random_range(0.4..0.55));
        let speed = rng.random_range(cfg.mover_speed.0..=cfg.mover_speed.1);
        let leg = rng.random_range(8..13);
        let depth_offset = (m as f64 - (cfg.movers as f64 - 1.0) / 2.0) * 1.2 + rng.random_range(-0.3..0.3);
        let base = view * depth_offset + Vector3::new(0.0, 0.0, half.z);
        let phase = rng.random_range(0..2 * leg);
        let spin = rng.random_range(0.04..0.08) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let yaw0 = rng.random_range(0.0..std::f64::consts::TAU);
        let poses = (0..cfg.frames)
            .map(|f| {
                let k = (f + phase) % (2 * leg);
                let s = if k < leg { k as f64 } else { (2 * leg - k) as f64 };
                let along = (s - leg as f64 / 2.0) * speed;
                let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw0 + spin * f as f64);
                Pose::new(*rot.matrix(), base + lateral * along)
            })
            .collect();
        movers.push(Mover { half, poses });
    }

    // Per-face textures: each scene draws its own palette.
    let palette_lo = rng.random_range(0.1..0.5);
    let palette_span = rng.random_range(0.2..0.45);
    let nbodies = 1 + boxes.len() + movers.len();
    let textures = (0..nbodies)
        .map(|_| {
            std::array::from_fn(|_| Texture {
                base: palette_lo + rng.random::<f64>() * palette_span,
                contrast: rng.random_range(0.1..0.35),
                scale: rng.random_range(0.15..0.6),
                noise_scale: rng.random_range(0.05..0.25),
                noise_seed: rng.random(),
            })
        })
        .collect();

    let mut scene = Scene {
        room,
        boxes,
        movers,
        textures,
        features: Vec::new(),
    };
    scene.features = sample_features(&scene, cfg, rng);

    check_camera(&scene, &poses)?;
    Ok((scene, poses))
}

fn check_camera(scene: &Scene, poses: &[Pose]) -> Result<(), SynthError> {
    for (f, pose) in poses.iter().enumerate() {
        let eye = pose.inverse().translation;
        let inside_box = scene.boxes.iter().any(|b| b.contains(&eye));
        let inside_mover = (0..scene.movers.len()).any(|i| {
            let local = scene.movers[i].poses[f].inverse().transform_point(&eye);
            scene.mover_box(i).contains(&local)
        });
        if !scene.room.contains(&eye) || inside_box || inside_mover {
            return Err(SynthError::CameraInsideGeometry { frame: f });
        }
    }
    Ok(())
}

fn sample_on_box(b: &Aabb, rng: &mut ChaCha8Rng) -> (usize, Vector3<f64>) {
    let areas: Vec<f64> = (0..6).map(|f| b.area(f)).collect();
    let total: f64 = areas.iter().sum();
    let mut r = rng.random::<f64>() * total;
    let mut face = 5;
    for (f, a) in areas.iter().enumerate() {
        if r < *a {
            face = f;
            break;
        }
        r -= a;
    }
    let axis = face / 2;
    let mut p = Vector3::zeros();
    for a in 0..3 {
        p[a] = if a == axis {
            if face % 2 == 1 { b.hi[a] } else { b.lo[a] }
        } else {
            rng.random_range(b.lo[a]..b.hi[a])
        };
    }
    (face, p)
}

fn sample_features(scene: &Scene, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<FeaturePoint> {
    let mut out = Vec::new();
    let room_area: f64 = (0..6).map(|f| scene.room.area(f)).sum();
    let box_area: Vec<f64> = scene.boxes.iter().map(|b| (0..6).map(|f| b.area(f)).sum()).collect();
    let total = room_area + box_area.iter().sum::<f64>();
    for _ in 0..cfg.static_features {
        let mut r = rng.random::<f64>() * total;
        if r < room_area {
            out.push(FeaturePoint {
                body: Body::Room,
                local: sample_on_box(&scene.room, rng).1,
            });
            continue;
        }
        r -= room_area;
        let mut i = scene.boxes.len() - 1;
        for (k, a) in box_area.iter().enumerate() {
            if r < *a {
                i = k;
                break;
            }
            r -= a;
        }
        out.push(FeaturePoint {
            body: Body::Box(i),
            local: sample_on_box(&scene.boxes[i], rng).1,
        });
    }
    for m in 0..scene.movers.len() {
        let b = scene.mover_box(m);
        for _ in 0..cfg.features_per_mover {
            out.push(FeaturePoint {
                body: Body::Mover(m),
                local: sample_on_box(&b, rng).1,
            });
        }
    }
    out
}

struct Render {
    image: Grid<f64>,
    depth: DepthMap,
    confidence: Grid<f64>,
    hits: Grid<Option<Hit>>,
}

fn render(scene: &Scene, k: &Intrinsics, pose: &Pose, frame: usize) -> Render {
    let inv = pose.inverse();
    let eye = inv.translation;
    let (w, h) = (k.width, k.height);
    let hits: Vec<Option<Hit>> = par::map_range(w * h, |i| {
        let (x, y) = (i % w, i / w);
        let d = inv.rotation * k.ray(x as f64, y as f64);
        scene.cast(&eye, &d, frame)
    });
    let hits = Grid::from_vec(w, h, hits).unwrap();
    let depth = hits.map(|h| h.map_or(0.0, |h| h.t));
    let confidence = Grid::from_fn(w, h, |x, y| match hits.get(x, y) {
        Some(hit) => {
            let d = (inv.rotation * k.ray(x as f64, y as f64)).normalize();
            (2.0 * hit.normal_world.dot(&d).abs()).min(1.0)
        }
        None => 0.0,
    });
    let image = hits.map(|h| h.as_ref().map_or(0.0, |h| scene.luminance(h)));
    Render {
        image,
        depth,
        confidence,
        hits,
    }
}

fn project_with_floor(k: &Intrinsics, pose: &Pose, p: &Vector3<f64>) -> Vector2<f64> {
    let c = pose.transform_point(p);
    let z = c.z.max(1e-6);
    Vector2::new(k.fx * c.x / z + k.cx, k.fy * c.y / z + k.cy)
}

/// Whether a feature point is the visible surface at its projection.
fn visible(scene: &Scene, k: &Intrinsics, pose: &Pose, frame: usize, f: &FeaturePoint) -> Option<Vector2<f64>> {
    let world = scene.feature_world(f, frame);
    let c = pose.transform_point(&world);
    if c.z <= 0.05 {
        return None;
    }
    let px = Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
    if !(px.x >= 0.0 && px.y >= 0.0 && px.x <= (k.width - 1) as f64 && px.y <= (k.height - 1) as f64) {
        return None;
    }
    let inv = pose.inverse();
    let hit = scene.cast(&inv.translation, &(inv.rotation * k.ray(px.x, px.y)), frame)?;
    (hit.body == f.body && (hit.t - c.z).abs() <= 1e-6 * c.z.max(1.0)).then_some(px)
}

/// 16×16 luminance thumbnail (256) followed by 8×8 cells × 12 unsigned
/// orientation bins of gradient magnitude (768), over static pixels only.
pub fn toy_visual_feature(image: &Grid<f64>, static_mask: &Mask) -> FeatureVec {
    let (w, h) = (image.width(), image.height());
    let mut out = vec![0f32; VISUAL_DIM];
    let cell = |n: usize, cells: usize, i: usize| (i * cells / n).min(cells - 1);
    let mut sum = [0f64; 256];
    let mut cnt = [0usize; 256];
    for y in 0..h {
        for x in 0..w {
            if *static_mask.get(x, y) {
                let c = cell(h, 16, y) * 16 + cell(w, 16, x);
                sum[c] += *image.get(x, y);
                cnt[c] += 1;
            }
        }
    }
    for c in 0..256 {
        if cnt[c] > 0 {
            out[c] = (sum[c] / cnt[c] as f64) as f32;
        }
    }
    let mut hist = [0f64; 768];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let ok = [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .all(|&(a, b)| *static_mask.get(a, b));
            if !ok {
                continue;
            }
            let gx = 0.5 * (image.get(x + 1, y) - image.get(x - 1, y));
            let gy = 0.5 * (image.get(x, y + 1) - image.get(x, y - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let ang = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            let bin = ((ang / std::f64::consts::PI * 12.0) as usize).min(11);
            let c = cell(h, 8, y) * 8 + cell(w, 8, x);
            hist[c * 12 + bin] += mag;
        }
    }
    let cell_area = (w * h) as f64 / 64.0;
    for (o, v) in out[256..].iter_mut().zip(hist.iter()) {
        *o = (v / cell_area) as f32;
    }
    FeatureVec::visual(out).expect("finite descriptor")
}

fn gauss(rng: &mut ChaCha8Rng, s: f64) -> f64 {
    if s > 0.0 {
        Normal::new(0.0, s).unwrap().sample(rng)
    } else {
        0.0
    }
}

pub fn perturb_extrinsic(pose: &Pose, rot_sigma: f64, trans_sigma: f64, rng: &mut ChaCha8Rng) -> Pose {
    let n_r = Vector3::new(gauss(rng, rot_sigma), gauss(rng, rot_sigma), gauss(rng, rot_sigma));
    let n_t = Vector3::new(gauss(rng, trans_sigma), gauss(rng, trans_sigma), gauss(rng, trans_sigma));
    Pose::new(so3_exp(&n_r) * pose.rotation, pose.translation + n_t)
}

/// Renders a full sequence. Identical configurations give bit-identical
/// output.
pub fn generate(cfg: &SceneConfig) -> Result<SynthSequence, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (scene, gt_poses) = build_scene(cfg, &mut rng)?;
    let k = cfg.intrinsics();
    let renders: Vec<Render> = gt_poses.iter().enumerate().map(|(f, p)| render(&scene, &k, p, f)).collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_SALT);
    let gauss = |rng: &mut ChaCha8Rng, s: f64| if s > 0.0 { Normal::new(0.0, s).unwrap().sample(rng) } else { 0.0 };

    let mut frames = Vec::with_capacity(cfg.frames);
    for (f, r) in renders.iter().enumerate() {
        let pose = gt_poses[f];
        let gt_mask = r.hits.map(|h| matches!(h, Some(Hit { body: Body::Mover(_), .. })));
        let gt_flow = (f > 0).then(|| {
            let prev = gt_poses[f - 1];
            Grid::from_vec(
                k.width,
                k.height,
                par::map_range(k.width * k.height, |i| match r.hits.as_slice()[i] {
                    Some(hit) => {
                        let (x, y) = (i % k.width, i / k.width);
                        let world_prev = scene.body_pose(hit.body, f - 1).transform_point(&hit.local);
                        project_with_floor(&k, &prev, &world_prev) - Vector2::new(x as f64, y as f64)
                    }
                    None => Vector2::zeros(),
                }),
            )
            .unwrap()
        });

        let (mut matches, mut match_ids) = (Vec::new(), Vec::new());
        if f > 0 {
            for (id, fp) in scene.features.iter().enumerate() {
                let (Some(a), Some(b)) = (
                    visible(&scene, &k, &pose, f, fp),
                    visible(&scene, &k, &gt_poses[f - 1], f - 1, fp),
                ) else {
                    continue;
                };
                matches.push(KeypointMatch {
                    pixel_t: a,
                    pixel_t2: b,
                    score: 1.0,
                });
                match_ids.push(id);
            }
        }

        let static_mask = gt_mask.map(|m| !m);
        let visual_feat = toy_visual_feature(&r.image, &static_mask);

        // Noise, drawn in a fixed order after ground truth is captured.
        let n = &cfg.noise;
        let depth = r.depth.map(|d| if *d > 0.0 { d * (1.0 + gauss(&mut noise_rng, n.depth_rel)) } else { 0.0 });
        let noisy_pose = perturb_extrinsic(&pose, n.rot, n.trans, &mut noise_rng);
        let flow = gt_flow.as_ref().map(|g| {
            g.map(|v| v + Vector2::new(gauss(&mut noise_rng, n.flow), gauss(&mut noise_rng, n.flow)))
        });
        for m in matches.iter_mut() {
            m.pixel_t += Vector2::new(gauss(&mut noise_rng, n.keypoint), gauss(&mut noise_rng, n.keypoint));
            m.pixel_t2 += Vector2::new(gauss(&mut noise_rng, n.keypoint), gauss(&mut noise_rng, n.keypoint));
        }

        frames.push(SynthFrame {
            image: r.image.clone(),
            gt_depth: r.depth.clone(),
            gt_pose: pose,
            gt_flow,
            gt_mask,
            depth,
            confidence: r.confidence.clone(),
            pose: noisy_pose,
            flow,
            matches,
            match_ids,
            visual_feat,
        });
    }
    Ok(SynthSequence {
        config: cfg.clone(),
        intrinsics: k,
        scene,
        frames,
    })
}
