//! Trajectory and mask evaluation.
//!
//! Trajectories are camera→world poses, so the translation of each pose is
//! the camera centre.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::grid::Mask;
use crate::icp::kabsch;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trajectory lengths differ: estimate has {est}, ground truth has {gt}")]
    LengthMismatch { est: usize, gt: usize },
    #[error("need at least {need} poses, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("mask shapes differ")]
    ShapeMismatch,
}

fn check(est: &[Pose], gt: &[Pose], need: usize) -> Result<(), MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    if est.len() < need {
        return Err(MetricsError::TooShort { need, got: est.len() });
    }
    Ok(())
}

/// Rigid transform that best maps the estimated camera centres onto the
/// ground-truth ones.
pub fn align(est: &[Pose], gt: &[Pose]) -> Result<Pose, MetricsError> {
    check(est, gt, 2)?;
    let a: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
    let b: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    Ok(kabsch(&a, &b, None))
}

/// Absolute trajectory error: RMSE of camera centres after rigid alignment
/// (no scale).
pub fn ate(est: &[Pose], gt: &[Pose]) -> Result<f64, MetricsError> {
    let s = align(est, gt)?;
    let sum: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (s.transform_point(&e.translation) - g.translation).norm_squared())
        .sum();
    Ok((sum / est.len() as f64).sqrt())
}

/// Relative pose error over a gap of `delta` frames: RMS of the translation
/// and rotation (degrees) parts of `log(rel_gt⁻¹ rel_est)`.
pub fn rpe(est: &[Pose], gt: &[Pose], delta: usize) -> Result<(f64, f64), MetricsError> {
    let delta = delta.max(1);
    check(est, gt, delta + 1)?;
    let terms = rpe_terms(est, gt, delta);
    let n = terms.len() as f64;
    let t = (terms.iter().map(|(t, _)| t * t).sum::<f64>() / n).sqrt();
    let r = (terms.iter().map(|(_, r)| r * r).sum::<f64>() / n).sqrt();
    Ok((t, r))
}

/// Per-pair `(translation, rotation°)` errors behind [`rpe`].
pub fn rpe_terms(est: &[Pose], gt: &[Pose], delta: usize) -> Vec<(f64, f64)> {
    (0..est.len().saturating_sub(delta))
        .map(|i| {
            let rel_e = est[i].inverse() * est[i + delta];
            let rel_g = gt[i].inverse() * gt[i + delta];
            let xi = Pose::diff(&rel_g, &rel_e);
            (xi.fixed_rows::<3>(0).norm(), xi.fixed_rows::<3>(3).norm().to_degrees())
        })
        .collect()
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn mask_iou(pred: &Mask, gt: &Mask) -> Result<f64, MetricsError> {
    if !pred.same_shape(gt) {
        return Err(MetricsError::ShapeMismatch);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Meters.
    pub ate_rmse: f64,
    /// Meters.
    pub rpe_trans: f64,
    /// Degrees.
    pub rpe_rot: f64,
    pub mask_iou: Option<f64>,
    /// Wall time per stage (seconds).
    pub timings: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        ok(self.ate_rmse)
            && ok(self.rpe_trans)
            && ok(self.rpe_rot)
            && self.mask_iou.is_none_or(|v| ok(v) && v <= 1.0)
            && self.timings.values().all(|v| ok(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use nalgebra::Vector6;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
        (0..n)
            .map(|_| {
                let xi = Vector6::from_fn(|i, _| rng.random_range(-1.0..1.0) * if i < 3 { 3.0 } else { 1.0 });
                Pose::exp(&xi)
            })
            .collect()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let w = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        Pose::new(so3_exp(&w), Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
    }

    #[test]
    fn ate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = trajectory(&mut rng, 20);
        assert!(ate(&gt, &gt).unwrap() < 1e-12);
        let g = random_pose(&mut rng);
        let moved: Vec<Pose> = gt.iter().map(|p| g * *p).collect();
        assert!(ate(&moved, &gt).unwrap() < 1e-9);
        assert_eq!(
            ate(&gt[..3], &gt[..4]),
            Err(MetricsError::LengthMismatch { est: 3, gt: 4 })
        );
    }

    #[test]
    fn ate_matches_noise_level() {
        let sigma = 0.05;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = trajectory(&mut rng, 200);
            let est: Vec<Pose> = gt
                .iter()
                .map(|p| {
                    let n = Vector3::from_fn(|_, _| { let z: f64 = StandardNormal.sample(&mut rng); sigma * z });
                    Pose::new(p.rotation, p.translation + n)
                })
                .collect();
            // Per-axis σ gives a 3-D RMSE of √3·σ before alignment.
            let a = ate(&est, &gt).unwrap() / 3f64.sqrt();
            assert!((0.7 * sigma..=1.3 * sigma).contains(&a), "seed {seed}: {a}");
        }
    }

    #[test]
    fn rpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = trajectory(&mut rng, 10);
        assert_eq!(rpe(&gt, &gt, 1).unwrap(), (0.0, 0.0));
        let bias = random_pose(&mut rng);
        let biased: Vec<Pose> = gt.iter().map(|p| bias * *p).collect();
        let (t, r) = rpe(&biased, &gt, 1).unwrap();
        assert!(t < 1e-9 && r < 1e-7);

        let mut bad = gt.clone();
        bad[4] = random_pose(&mut rng) * bad[4];
        let terms = rpe_terms(&bad, &gt, 1);
        let affected: Vec<usize> = (0..terms.len()).filter(|&i| terms[i].0 > 1e-9 || terms[i].1 > 1e-7).collect();
        assert_eq!(affected, vec![3, 4]);
    }

    #[test]
    fn mask_iou_examples() {
        let a = Mask::from_fn(10, 10, |x, y| x < 4 && y < 4);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = Mask::from_fn(10, 10, |x, y| x >= 5 && y >= 5);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        let e = Mask::filled(10, 10, false);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        // Two 4×4 squares overlapping in a 4×2 band: 8 / 24.
        let c = Mask::from_fn(10, 10, |x, y| (2..6).contains(&x) && y < 4);
        assert!((mask_iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &Mask::filled(3, 3, false)), Err(MetricsError::ShapeMismatch));
    }

    proptest! {
        #[test]
        fn ate_is_invariant_to_rigid_transform(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = trajectory(&mut rng, 8);
            let est = trajectory(&mut rng, 8);
            let g = random_pose(&mut rng);
            let moved: Vec<Pose> = est.iter().map(|p| g * *p).collect();
            prop_assert!((ate(&est, &gt).unwrap() - ate(&moved, &gt).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn rpe_is_invariant_to_left_multiplication(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = trajectory(&mut rng, 6);
            let est = trajectory(&mut rng, 6);
            let g = random_pose(&mut rng);
            let h = random_pose(&mut rng);
            let (a, b) = rpe(&est, &gt, 2).unwrap();
            let est2: Vec<Pose> = est.iter().map(|p| g * *p).collect();
            let gt2: Vec<Pose> = gt.iter().map(|p| h * *p).collect();
            let (c, d) = rpe(&est2, &gt2, 2).unwrap();
            prop_assert!((a - c).abs() < 1e-8 && (b - d).abs() < 1e-6);
        }
    }
}
