//! Frame ingestion, end-to-end orchestration and file formats.

mod config;
mod format;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{Matrix2, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ConfigError, GraphConfig, Paths, PipelineConfig};
pub use format::*;

use crate::geometry::{depth_is_valid, DepthMap, FlowField, Intrinsics, PointCloud, Pose};
use crate::grid::{Grid, Mask};
use crate::icp::bbox_diagonal;
use crate::membank::{self, select_keyframes, voxel_downsample, AlignmentResult, FeatureVec, MapId, MemoryBank, MemoryMap};
use crate::metrics::{self, MetricsReport};
use crate::motioncue::{
    detect_new_movers, geometry_motion_cue, propagate_mask, segment_pair, track_mask, FramePair, KeypointMatches,
    SegmentParams,
};
use crate::posegraph::{
    associate_landmarks, inject_memory_landmarks, select_landmarks, solve, track_candidates, AssociationConfig,
    AssociationGate, FactorGraphProblem, SolveReport,
};

/// Per-frame priors.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub frame_id: u64,
    pub intrinsics: Intrinsics,
    /// World→camera extrinsic.
    pub init_pose: Pose,
    pub depth: DepthMap,
    pub confidence: Grid<f64>,
    /// Flow from this frame to the previous one.
    pub flow_prev: Option<FlowField>,
    pub visual_feat: Option<FeatureVec>,
    /// Matches from this frame to the previous one.
    pub matches_prev: Option<KeypointMatches>,
}

impl FrameBundle {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn depth_valid(&self, x: usize, y: usize) -> bool {
        depth_is_valid(*self.depth.get(x, y))
    }

    /// The bundle as it reads back from disk: grids rounded to `f32`.
    pub fn quantized(&self) -> FrameBundle {
        let q = |v: f64| v as f32 as f64;
        FrameBundle {
            depth: self.depth.map(|v| q(*v)),
            confidence: self.confidence.map(|v| q(*v)),
            flow_prev: self.flow_prev.as_ref().map(|f| f.map(|v| v.map(q))),
            ..self.clone()
        }
    }
}

/// Checks shared dimensions and strictly increasing frame ids.
pub fn validate_frames(frames: &[FrameBundle]) -> Result<(), PipelineError> {
    let mut prev: Option<u64> = None;
    for f in frames {
        let bad = |detail: String| PipelineError::Sequence {
            frame_id: f.frame_id,
            detail,
        };
        if prev.is_some_and(|p| f.frame_id <= p) {
            return Err(bad("frame ids must be strictly increasing".into()));
        }
        prev = Some(f.frame_id);
        let (w, h) = (f.intrinsics.width, f.intrinsics.height);
        if (f.width(), f.height()) != (w, h) || !f.confidence.same_shape(&f.depth) {
            return Err(bad(format!("grids do not match the {w}×{h} intrinsics")));
        }
        if f.flow_prev.as_ref().is_some_and(|g| !g.same_shape(&f.depth)) {
            return Err(bad("flow has different dimensions".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Ingest,
    Segment,
    Memory,
    Optimize,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Ingest => "ingest",
            Stage::Segment => "segment",
            Stage::Memory => "memory",
            Stage::Optimize => "optimize",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {field}: {detail}", file.display())]
    Format { file: PathBuf, field: String, detail: String },
    #[error("frame {frame_id}: {detail}")]
    Sequence { frame_id: u64, detail: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} stage failed at frame {frame}: {source}")]
    Stage {
        frame: u64,
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(frame: u64, stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        frame,
        stage,
        source: Box::new(e),
    }
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// Dynamic mask per frame.
    pub masks: Vec<Mask>,
    /// Frames whose mask came from the full three-cue pipeline.
    pub full: Vec<usize>,
}

fn pair<'a>(frames: &'a [FrameBundle], t: usize, flow: &'a FlowField) -> FramePair<'a> {
    let (cur, prev) = (&frames[t], &frames[t - 1]);
    FramePair {
        flow,
        depth_t: &cur.depth,
        depth_t2: &prev.depth,
        k_t: &cur.intrinsics,
        k_t2: &prev.intrinsics,
        e_t: &cur.init_pose,
        e_t2: &prev.init_pose,
        matches: cur.matches_prev.as_deref().unwrap_or(&[]),
    }
}

/// Dynamic masks for a whole sequence.
///
/// Pair `(1, 0)` and every pair where new movers appear run the full
/// three-cue segmentation; other frames track the previous mask. Frame 0
/// receives the first full mask warped back along the flow.
pub fn segment_sequence(frames: &[FrameBundle], params: &SegmentParams) -> Result<Segmentation, PipelineError> {
    validate_frames(frames)?;
    let empty = |f: &FrameBundle| Grid::filled(f.width(), f.height(), false);
    let mut masks: Vec<Mask> = Vec::with_capacity(frames.len());
    let mut full = Vec::new();
    let mut need_full = true;
    for t in 0..frames.len() {
        if t == 0 {
            masks.push(empty(&frames[0]));
            continue;
        }
        let id = frames[t].frame_id;
        let Some(flow) = frames[t].flow_prev.as_ref() else {
            warn!("frame {id}: no flow; mask left empty");
            masks.push(empty(&frames[t]));
            need_full = true;
            continue;
        };
        let p = pair(frames, t, flow);
        let mut run_full = need_full;
        let mut tracked = None;
        if !run_full {
            let geo = geometry_motion_cue(p.flow, p.depth_t, p.k_t, p.k_t2, p.e_t, p.e_t2, &params.geo)
                .map_err(stage_err(id, Stage::Segment))?;
            let m = track_mask(&masks[t - 1], flow, &geo.m_geo);
            run_full = detect_new_movers(&geo.m_geo, &m, params.delta_new);
            tracked = Some(m);
        }
        let mask = match tracked {
            Some(m) if !run_full => m,
            _ => {
                debug!("frame {id}: full segmentation");
                full.push(t);
                segment_pair(&p, params).map_err(stage_err(id, Stage::Segment))?.m_dyn
            }
        };
        if t == 1 {
            masks[0] = propagate_mask(&mask, flow);
        }
        masks.push(mask);
        need_full = false;
    }
    Ok(Segmentation { masks, full })
}

// ---------------------------------------------------------------------------
// Static clouds and memory
// ---------------------------------------------------------------------------

/// World points of the static, confident, valid-depth pixels of a frame,
/// lifted with its initial pose and weighted by confidence.
pub fn static_points(frame: &FrameBundle, mask: &Mask, conf_min: f64) -> PointCloud {
    let to_world = frame.init_pose.inverse();
    let k = &frame.intrinsics;
    let mut out = PointCloud::default();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let (d, c) = (*frame.depth.get(x, y), *frame.confidence.get(x, y));
            if !*mask.get(x, y) && c >= conf_min && depth_is_valid(d) {
                out.push(to_world.transform_point(&(k.ray(x as f64, y as f64) * d)), c);
            }
        }
    }
    out
}

/// Incrementally voxel-downsampled union of static points.
#[derive(Clone, Debug, Default)]
pub struct StaticAccumulator {
    pub cloud: PointCloud,
    pub voxel: Option<f64>,
    voxel_frac: f64,
}

impl StaticAccumulator {
    pub fn new(voxel: Option<f64>, voxel_frac: f64) -> Self {
        Self {
            cloud: PointCloud::default(),
            voxel,
            voxel_frac,
        }
    }

    /// Adds points; the voxel size is fixed from the first non-empty batch
    /// when not configured.
    pub fn add(&mut self, pts: &PointCloud) {
        if pts.is_empty() {
            return;
        }
        let v = *self.voxel.get_or_insert_with(|| (self.voxel_frac * bbox_diagonal(&pts.points)).max(1e-6));
        self.cloud.extend(pts);
        self.cloud = voxel_downsample(&self.cloud, v);
    }
}

/// One recall attempt at a cadence point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEvent {
    pub frame_id: u64,
    pub query_points: usize,
    pub query_keyframes: usize,
    pub voted: Option<MapId>,
    pub accepted: Option<MapId>,
    pub inliers: Option<usize>,
    pub rmse: Option<f64>,
}

/// A map recalled during a run: its state before this run touched it and
/// the alignment of the current world frame onto it.
#[derive(Clone, Debug)]
pub struct Recalled {
    pub map: MemoryMap,
    pub alignment: AlignmentResult,
}

/// Keyframe indices among `feats`, using `d_target` or the median distance
/// between consecutive features.
pub fn keyframes(feats: &[FeatureVec], d_target: Option<f64>) -> Vec<usize> {
    let d = d_target.unwrap_or_else(|| {
        let mut d: Vec<f64> = feats.windows(2).map(|w| w[0].distance(&w[1])).collect();
        d.sort_by(f64::total_cmp);
        d.get(d.len() / 2).copied().unwrap_or(0.0)
    });
    select_keyframes(feats, d)
}

#[derive(Clone, Debug, Default)]
pub struct MemoryOutcome {
    pub events: Vec<RecallEvent>,
    pub recalled: Option<Recalled>,
    pub created: Option<MapId>,
    pub updated: Option<MapId>,
    /// Accumulated static cloud of the sequence (current world frame).
    pub cloud: PointCloud,
    pub voxel: Option<f64>,
}

/// Cadence-driven recall and update over a segmented sequence.
///
/// At every cadence point the accumulated static cloud and the keyframe
/// features so far are recalled against the bank. An accepted recall
/// merges the cloud and any new keyframe features into the recalled map.
/// Without any accepted recall a new map is created at the end.
pub fn memory_pass(
    frames: &[FrameBundle],
    masks: &[Mask],
    bank: &mut MemoryBank,
    cfg: &PipelineConfig,
) -> Result<MemoryOutcome, PipelineError> {
    let mut acc = StaticAccumulator::new(cfg.voxel, cfg.voxel_frac);
    let mut out = MemoryOutcome::default();
    let mut stored_frames: BTreeSet<u64> = BTreeSet::new();
    let n = frames.len();
    for (t, f) in frames.iter().enumerate() {
        if t % cfg.stride == 0 {
            acc.add(&static_points(f, &masks[t], cfg.conf_min));
        }
        let cadence_point = (t + 1) % cfg.cadence == 0 || t + 1 == n;
        if !cadence_point {
            continue;
        }
        let feats: Vec<(u64, FeatureVec)> = frames[..=t]
            .iter()
            .filter_map(|f| f.visual_feat.clone().map(|v| (f.frame_id, v)))
            .collect();
        if feats.is_empty() || acc.cloud.is_empty() {
            continue;
        }
        let only: Vec<FeatureVec> = feats.iter().map(|(_, v)| v.clone()).collect();
        let kf: Vec<(u64, FeatureVec)> = keyframes(&only, cfg.kf_d_target).into_iter().map(|i| feats[i].clone()).collect();
        let query: Vec<FeatureVec> = kf.iter().map(|(_, v)| v.clone()).collect();
        let r = bank
            .recall(&query, &acc.cloud, &Pose::identity())
            .map_err(stage_err(f.frame_id, Stage::Memory))?;
        info!(
            "frame {}: recall voted {:?}, accepted {:?} ({} query points)",
            f.frame_id,
            r.voted,
            r.candidate,
            acc.cloud.len()
        );
        out.events.push(RecallEvent {
            frame_id: f.frame_id,
            query_points: acc.cloud.len(),
            query_keyframes: query.len(),
            voted: r.voted,
            accepted: r.candidate,
            inliers: r.alignment.as_ref().map(|a| a.inlier_count),
            rmse: r.alignment.as_ref().map(|a| a.rmse),
        });
        let (Some(id), Some(alignment)) = (r.candidate, r.alignment) else {
            continue;
        };
        if out.recalled.as_ref().is_some_and(|rc| rc.map.map_id != id) {
            warn!("frame {}: recall switched to map {id}; keeping the first recalled map", f.frame_id);
            continue;
        }
        if out.recalled.is_none() {
            let map = bank.map(id).expect("recalled map exists").clone();
            stored_frames.extend(map.keyframe_feats.iter().map(|(fid, _)| *fid));
            out.recalled = Some(Recalled {
                map,
                alignment,
            });
        } else if let Some(rc) = out.recalled.as_mut() {
            rc.alignment = alignment;
        }
        let new_kf: Vec<(u64, FeatureVec)> = kf.into_iter().filter(|(fid, _)| stored_frames.insert(*fid)).collect();
        bank.update_map(id, &acc.cloud, new_kf, &alignment)
            .map_err(stage_err(f.frame_id, Stage::Memory))?;
        out.updated = Some(id);
    }
    if out.recalled.is_none() && !acc.cloud.is_empty() {
        let feats: Vec<(u64, FeatureVec)> = frames
            .iter()
            .filter_map(|f| f.visual_feat.clone().map(|v| (f.frame_id, v)))
            .collect();
        let only: Vec<FeatureVec> = feats.iter().map(|(_, v)| v.clone()).collect();
        let kf = if only.is_empty() {
            Vec::new()
        } else {
            keyframes(&only, cfg.kf_d_target).into_iter().map(|i| feats[i].clone()).collect()
        };
        let last = frames.last().map_or(0, |f| f.frame_id);
        let voxel = acc.voxel.expect("set with the first points");
        let id = bank
            .create_map(&acc.cloud, kf, None, voxel)
            .map_err(stage_err(last, Stage::Memory))?;
        info!("created map {id} with {} points", bank.map(id).map_or(0, |m| m.cloud.len()));
        out.created = Some(id);
    }
    out.voxel = acc.voxel;
    out.cloud = acc.cloud;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectory refinement
// ---------------------------------------------------------------------------

/// Builds the factor graph for a segmented sequence. `d_scene` scales the
/// association threshold; `recalled` adds memory landmarks.
pub fn build_problem(
    frames: &[FrameBundle],
    masks: &[Mask],
    cfg: &PipelineConfig,
    d_scene: f64,
    recalled: Option<&Recalled>,
) -> Result<FactorGraphProblem, PipelineError> {
    let g = &cfg.graph;
    let last = frames.last().map_or(0, |f| f.frame_id);
    let has_matches = frames.iter().any(|f| f.matches_prev.as_ref().is_some_and(|m| !m.is_empty()));
    let cands = if has_matches {
        track_candidates(frames, masks, cfg.conf_min, g.link_px)
    } else {
        select_landmarks(frames, masks, cfg.conf_min, g.grid_step)
    };
    let ext: Vec<Pose> = frames.iter().map(|f| f.init_pose).collect();
    let ks: Vec<Intrinsics> = frames.iter().map(|f| f.intrinsics).collect();
    let assoc_cfg = AssociationConfig {
        tau_min: g.tau_min,
        alpha_assoc: g.alpha_assoc,
        d_scene,
    };
    assoc_cfg.validate().map_err(stage_err(last, Stage::Optimize))?;
    let gate = AssociationGate {
        extrinsics: &ext,
        intrinsics: &ks,
        huber_delta: g.huber_delta,
    };
    let assoc = associate_landmarks(&cands, &assoc_cfg, &gate, Matrix2::identity() * (g.sigma_px * g.sigma_px));
    let mut p = FactorGraphProblem::from_extrinsics(ks, &ext);
    p.sigma_prior = Matrix6::identity() * g.prior_var;
    let (t2, r2) = (g.motion_sigma_t * g.motion_sigma_t, g.motion_sigma_r * g.motion_sigma_r);
    p.sigma_motion = Matrix6::from_diagonal(&Vector6::new(t2, t2, t2, r2, r2, r2));
    p.huber_delta = g.huber_delta;
    p.alpha_mem = g.alpha_mem;
    p.sigma_anchor = g.sigma_anchor;
    p.add_association(&assoc);
    if let Some(rc) = recalled {
        let added = inject_memory_landmarks(&mut p, &rc.map, &rc.alignment, g.alpha_mem, assoc_cfg.tau_dist())
            .map_err(stage_err(last, Stage::Optimize))?;
        info!("{added} memory landmarks injected");
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: usize,
    pub full_segmentations: Vec<usize>,
    pub recalls: Vec<RecallEvent>,
    pub recalled_map: Option<MapId>,
    pub created_map: Option<MapId>,
    pub landmarks: usize,
    pub memory_landmarks: usize,
    pub observations: usize,
    pub solve: SolveReport,
    /// Wall time per stage (seconds).
    pub timings: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub frame_ids: Vec<u64>,
    pub masks: Vec<Mask>,
    /// Refined world→camera extrinsics.
    pub extrinsics: Vec<Pose>,
    pub summary: RunSummary,
}

impl RunOutput {
    /// Refined camera→world poses.
    pub fn trajectory(&self) -> Vec<Pose> {
        self.extrinsics.iter().map(Pose::inverse).collect()
    }
}

/// Segment → recall/update → optimize over an in-memory sequence. The bank
/// is modified in place; nothing is written.
pub fn run(frames: &[FrameBundle], bank: &mut MemoryBank, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    validate_frames(frames)?;
    let mut timings = BTreeMap::new();
    let mut seg_params = cfg.segment;
    seg_params.seed = cfg.seed;

    let t = Instant::now();
    let seg = segment_sequence(frames, &seg_params)?;
    timings.insert("segment".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    bank.params = cfg.recall;
    let mem = memory_pass(frames, &seg.masks, bank, cfg)?;
    timings.insert("memory".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let d_scene = bbox_diagonal(&mem.cloud.points);
    let problem = build_problem(frames, &seg.masks, cfg, d_scene, mem.recalled.as_ref())?;
    let last = frames.last().map_or(0, |f| f.frame_id);
    let result = solve(&problem, &cfg.graph.solve).map_err(stage_err(last, Stage::Optimize))?;
    timings.insert("optimize".to_string(), t.elapsed().as_secs_f64());

    let summary = RunSummary {
        frames: frames.len(),
        full_segmentations: seg.full,
        recalls: mem.events,
        recalled_map: mem.recalled.as_ref().map(|r| r.map.map_id),
        created_map: mem.created,
        landmarks: problem.landmarks.len(),
        memory_landmarks: problem.landmarks.iter().filter(|l| l.from_memory).count(),
        observations: problem.observations.len(),
        solve: result.report.clone(),
        timings,
    };
    Ok(RunOutput {
        frame_ids: frames.iter().map(|f| f.frame_id).collect(),
        masks: seg.masks,
        extrinsics: result.extrinsics(),
        summary,
    })
}

/// Ground truth stored beside a synthetic sequence (`gt/trajectory.tum`,
/// `gt/masks/`).
pub fn read_ground_truth(root: &Path, frame_ids: &[u64]) -> Result<Option<(Vec<Pose>, Option<Vec<Mask>>)>, PipelineError> {
    let gt = root.join("gt");
    let traj = gt.join("trajectory.tum");
    if !traj.exists() {
        return Ok(None);
    }
    let poses = read_trajectory(&traj)?;
    let mask_dir = gt.join("masks");
    let masks = if mask_dir.exists() {
        Some(frame_ids.iter().map(|&id| read_pgm(&frame_file(&mask_dir, id, "pgm"))).collect::<Result<_, _>>()?)
    } else {
        None
    };
    Ok(Some((poses, masks)))
}

/// Writes camera→world ground truth and masks under `<root>/gt`.
pub fn write_ground_truth(root: &Path, frame_ids: &[u64], poses: &[Pose], masks: &[Mask]) -> Result<(), PipelineError> {
    let dir = root.join("gt").join("masks");
    fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
    write_trajectory(&root.join("gt").join("trajectory.tum"), poses)?;
    for (id, m) in frame_ids.iter().zip(masks) {
        write_pgm(&frame_file(&dir, *id, "pgm"), m)?;
    }
    Ok(())
}

/// Writes a synthetic sequence's noisy priors in the sequence layout plus
/// its ground truth.
pub fn write_synth(root: &Path, seq: &crate::synth::SynthSequence) -> Result<(), PipelineError> {
    let bundles = seq.bundles();
    write_sequence(root, &bundles)?;
    let ids: Vec<u64> = bundles.iter().map(|b| b.frame_id).collect();
    let gt: Vec<Pose> = seq.gt_poses().iter().map(Pose::inverse).collect();
    write_ground_truth(root, &ids, &gt, &seq.gt_masks())
}

/// Trajectory and mask metrics against ground truth.
pub fn evaluate(
    est: &[Pose],
    gt: &[Pose],
    masks: Option<(&[Mask], &[Mask])>,
    timings: BTreeMap<String, f64>,
) -> Result<MetricsReport, metrics::MetricsError> {
    let ate_rmse = metrics::ate(est, gt)?;
    let (rpe_trans, rpe_rot) = metrics::rpe(est, gt, 1)?;
    let mask_iou = match masks {
        Some((pred, truth)) => {
            if pred.len() != truth.len() {
                return Err(metrics::MetricsError::LengthMismatch {
                    est: pred.len(),
                    gt: truth.len(),
                });
            }
            let ious = pred.iter().zip(truth).map(|(p, g)| metrics::mask_iou(p, g)).collect::<Result<Vec<_>, _>>()?;
            Some(ious.iter().sum::<f64>() / ious.len().max(1) as f64)
        }
        None => None,
    };
    Ok(MetricsReport {
        ate_rmse,
        rpe_trans,
        rpe_rot,
        mask_iou,
        timings,
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{name}.{suffix}"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Replaces `dir` by a directory filled by `fill`, via a staging sibling
/// and renames. The staging directory is removed on failure.
pub fn write_dir_atomically(dir: &Path, fill: impl FnOnce(&Path) -> Result<(), PipelineError>) -> Result<(), PipelineError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    let staging = sibling(dir, "tmp");
    let old = sibling(dir, "old");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io(&staging))?;
    if let Err(e) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io(&old))?;
    }
    if dir.exists() {
        fs::rename(dir, &old).map_err(io(dir))?;
    }
    fs::rename(&staging, dir).map_err(io(dir))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io(&old))?;
    }
    Ok(())
}

/// Writes `masks/`, `trajectory.tum`, `run.json` and, when ground truth is
/// given, `metrics.json` into `out` atomically.
pub fn write_outputs(out: &Path, output: &RunOutput, metrics: Option<&MetricsReport>) -> Result<(), PipelineError> {
    write_dir_atomically(out, |dir| {
        let masks = dir.join("masks");
        fs::create_dir_all(&masks).map_err(|source| PipelineError::Io { path: masks.clone(), source })?;
        for (id, m) in output.frame_ids.iter().zip(&output.masks) {
            write_pgm(&frame_file(&masks, *id, "pgm"), m)?;
        }
        write_trajectory(&dir.join("trajectory.tum"), &output.trajectory())?;
        write_json(&dir.join("run.json"), &output.summary)?;
        if let Some(m) = metrics {
            write_json(&dir.join("metrics.json"), m)?;
        }
        Ok(())
    })
}

/// Ingests a sequence directory, runs the pipeline against the bank at
/// `bank_dir` (created when missing) and writes all outputs. The bank is
/// persisted before the outputs are moved into place; on any error no
/// partial output remains.
pub fn run_dir(seq: &Path, bank_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    let t = Instant::now();
    let frames = ingest_all(seq)?;
    let ingest_time = t.elapsed().as_secs_f64();
    let mut bank = if ["", "old", "new"].iter().any(|s| if s.is_empty() { bank_dir.exists() } else { sibling(bank_dir, s).exists() }) {
        membank::load(bank_dir).map_err(stage_err(0, Stage::Ingest))?
    } else {
        MemoryBank::new()
    };
    let mut output = run(&frames, &mut bank, cfg)?;
    output.summary.timings.insert("ingest".into(), ingest_time);
    let t = Instant::now();
    let last = output.frame_ids.last().copied().unwrap_or(0);
    let metrics = match read_ground_truth(seq, &output.frame_ids)? {
        Some((gt, gt_masks)) => Some(
            evaluate(
                &output.trajectory(),
                &gt,
                gt_masks.as_deref().map(|g| (output.masks.as_slice(), g)),
                output.summary.timings.clone(),
            )
            .map_err(stage_err(last, Stage::Output))?,
        ),
        None => None,
    };
    membank::persist(&bank, bank_dir).map_err(stage_err(last, Stage::Output))?;
    output.summary.timings.insert("output".into(), t.elapsed().as_secs_f64());
    write_outputs(out, &output, metrics.as_ref())?;
    Ok(output)
}
