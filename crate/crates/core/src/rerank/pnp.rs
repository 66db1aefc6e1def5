//! PnP-RANSAC over 2D-3D matches: P3P hypotheses on 3-point samples
//! disambiguated by a fourth point, adaptive stopping, then Gauss-Newton
//! refinement on the inliers.

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::p3p;
use super::Match2D3D;
use crate::geometry::{PinholeCamera, PoseSE3};

const REFINE_ITERATIONS: usize = 10;
const MIN_REFINE_POINTS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("need at least 4 matches, got {0}")]
    TooFewMatches(usize),
    #[error("no model with at least {min} inliers (best had {best})")]
    NoModelFound { best: usize, min: usize },
    #[error("invalid RANSAC configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub confidence: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { max_iterations: 1000, inlier_threshold_px: 8.0, confidence: 0.999, min_inliers: 12, rng_seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PnpError> {
        if !(self.inlier_threshold_px > 0.0) {
            return Err(PnpError::BadConfig("inlier threshold must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PnpError::BadConfig("confidence must lie in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(PnpError::BadConfig("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPResult {
    pub pose: PoseSE3,
    pub inlier_ids: Vec<u64>,
    pub num_inliers: usize,
    pub reproj_threshold: f64,
    pub iterations: usize,
}

fn reprojection_error(camera: &PinholeCamera, pose: &PoseSE3, m: &Match2D3D) -> f64 {
    match camera.project(&pose.transform_point(&m.world)) {
        Ok(px) => (px - m.query_pixel).norm(),
        Err(_) => f64::INFINITY,
    }
}

fn inliers(camera: &PinholeCamera, pose: &PoseSE3, matches: &[Match2D3D], threshold: f64) -> Vec<usize> {
    (0..matches.len()).filter(|&i| reprojection_error(camera, pose, &matches[i]) < threshold).collect()
}

/// Gauss-Newton on the reprojection error of the selected matches.
pub fn refine_pose(camera: &PinholeCamera, init: &PoseSE3, matches: &[Match2D3D], idx: &[usize]) -> PoseSE3 {
    let cost =
        |pose: &PoseSE3| -> f64 { idx.iter().map(|&i| reprojection_error(camera, pose, &matches[i]).powi(2)).sum() };
    let mut pose = *init;
    let mut current = cost(&pose);
    for _ in 0..REFINE_ITERATIONS {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for &i in idx {
            let m = &matches[i];
            let Ok((px, j)) = camera.project_with_pose_jacobian(&pose.transform_point(&m.world)) else {
                continue;
            };
            let r: Vector2<f64> = px - m.query_pixel;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(chol) = h.cholesky() else { break };
        let delta = -chol.solve(&g);
        let next = pose.retract(&delta);
        let c = cost(&next);
        if !(c <= current) {
            break;
        }
        pose = next;
        let done = current - c <= 1e-14 * current.max(1e-300) || delta.norm() < 1e-14;
        current = c;
        if done {
            break;
        }
    }
    pose
}

/// Refines on the inlier set, then re-selects a consensus core whose
/// residuals are consistent with the robust spread of the inliers.
fn refine_robust(camera: &PinholeCamera, init: &PoseSE3, matches: &[Match2D3D], threshold: f64) -> PoseSE3 {
    let mut set = inliers(camera, init, matches, threshold);
    if set.len() < MIN_REFINE_POINTS {
        return *init;
    }
    let mut pose = refine_pose(camera, init, matches, &set);
    for _ in 0..3 {
        let mut res: Vec<f64> = set.iter().map(|&i| reprojection_error(camera, &pose, &matches[i])).collect();
        res.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sigma = 1.4826 * res[res.len() / 2];
        let cut = (3.0 * sigma).max(1e-3).min(threshold);
        let core = inliers(camera, &pose, matches, cut);
        if core.len() < MIN_REFINE_POINTS || core == set {
            break;
        }
        set = core;
        pose = refine_pose(camera, &pose, matches, &set);
    }
    pose
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Robust absolute pose from 2D-3D matches.
pub fn pnp_ransac(matches: &[Match2D3D], camera: &PinholeCamera, config: &RansacConfig) -> Result<PnPResult, PnpError> {
    pnp_ransac_salted(matches, camera, config, 0)
}

/// As [`pnp_ransac`], with the random stream seeded by `(config.rng_seed, salt)`.
pub fn pnp_ransac_salted(
    matches: &[Match2D3D],
    camera: &PinholeCamera,
    config: &RansacConfig,
    salt: u64,
) -> Result<PnPResult, PnpError> {
    config.validate()?;
    if matches.len() < 4 {
        return Err(PnpError::TooFewMatches(matches.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.rng_seed, salt));
    let thr = config.inlier_threshold_px;
    let bearings: Vec<Vector3<f64>> = matches.iter().map(|m| camera.unproject(&m.query_pixel).normalize()).collect();

    let mut best: Option<(PoseSE3, usize)> = None;
    let mut needed = config.max_iterations;
    let mut it = 0;
    while it < needed.min(config.max_iterations) {
        it += 1;
        let s = sample(&mut rng, matches.len(), 4);
        let (i0, i1, i2, i3) = (s.index(0), s.index(1), s.index(2), s.index(3));
        let world = [matches[i0].world, matches[i1].world, matches[i2].world];
        let rays = [bearings[i0], bearings[i1], bearings[i2]];
        let hypothesis = p3p::solve(&world, &rays)
            .into_iter()
            .map(|pose| (reprojection_error(camera, &pose, &matches[i3]), pose))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        let Some((_, pose)) = hypothesis else { continue };
        let count = matches.iter().filter(|m| reprojection_error(camera, &pose, m) < thr).count();
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((pose, count));
            let ratio = count as f64 / matches.len() as f64;
            let p_good = ratio.powi(4);
            needed = if p_good >= 1.0 - 1e-12 {
                it
            } else if p_good <= 0.0 {
                config.max_iterations
            } else {
                let n = (1.0 - config.confidence).ln() / (1.0 - p_good).ln();
                n.ceil().max(1.0) as usize
            };
        }
    }

    let Some((pose, count)) = best else {
        return Err(PnpError::NoModelFound { best: 0, min: config.min_inliers });
    };
    if count < config.min_inliers.max(4) {
        return Err(PnpError::NoModelFound { best: count, min: config.min_inliers });
    }
    let refined = refine_robust(camera, &pose, matches, thr);
    let idx = inliers(camera, &refined, matches, thr);
    // keep the hypothesis if refinement lost support
    let (pose, idx) = if idx.len() >= count { (refined, idx) } else { (pose, inliers(camera, &pose, matches, thr)) };
    if idx.len() < config.min_inliers.max(4) {
        return Err(PnpError::NoModelFound { best: idx.len(), min: config.min_inliers });
    }
    let mut inlier_ids: Vec<u64> = idx.iter().map(|&i| matches[i].point_id).collect();
    inlier_ids.sort_unstable();
    Ok(PnPResult { pose, num_inliers: inlier_ids.len(), inlier_ids, reproj_threshold: thr, iterations: it })
}
