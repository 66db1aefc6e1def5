//! Coarse-to-fine feature-metric pose refinement.
//!
//! For every map point the query features at its projection are compared
//! with the reference keyframe features at the point's keyframe pixel. The
//! weighted robust sum of squared differences is minimized over the query
//! pose with Levenberg-Marquardt, one pyramid level at a time.

use nalgebra::{Cholesky, Matrix6, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature::{FeaturePyramid, PyramidLevel};
use crate::geometry::{PinholeCamera, PoseSE3, Tangent};
use crate::scene_map::ScenePoint;

const CHOLESKY_RETRIES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("stride {0} missing from a pyramid")]
    LevelMissing(u32),
    #[error("no point projects validly into both views at stride {0}")]
    NoValidPoints(u32),
    #[error("normal equations stayed singular after damping retries")]
    SingularSystem,
    #[error("invalid alignment configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustLoss {
    None,
    Huber,
    Cauchy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    TopKeyframeObs,
    AllCandidateObs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Strides, coarse to fine.
    pub level_order: Vec<u32>,
    pub max_iters_per_level: usize,
    /// Robust scale per level, or a single value for all levels.
    pub huber_scale: Vec<f64>,
    pub robust_loss: RobustLoss,
    /// Per-DoF damping, ordered (translation, rotation).
    pub damping: [f64; 6],
    pub damping_up: f64,
    pub damping_down: f64,
    pub damping_min: f64,
    pub damping_max: f64,
    pub step_tol: f64,
    pub point_source: PointSource,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            level_order: vec![16, 4, 1],
            max_iters_per_level: 30,
            huber_scale: vec![1.0, 0.3, 0.01],
            robust_loss: RobustLoss::Cauchy,
            damping: [0.01; 6],
            damping_up: 10.0,
            damping_down: 0.1,
            damping_min: 1e-6,
            damping_max: 1e4,
            step_tol: 1e-6,
            point_source: PointSource::TopKeyframeObs,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: &str| Err(AlignError::BadConfig(m.to_string()));
        if self.level_order.is_empty() {
            return bad("level_order is empty");
        }
        if self.huber_scale.len() != 1 && self.huber_scale.len() != self.level_order.len() {
            return bad("huber_scale needs one value or one per level");
        }
        if self.huber_scale.iter().any(|g| !(*g > 0.0)) {
            return bad("huber_scale must be positive");
        }
        if self.damping.iter().any(|l| !(*l >= 0.0)) {
            return bad("damping must be non-negative");
        }
        if !(self.step_tol > 0.0) {
            return bad("step_tol must be positive");
        }
        if !(self.damping_min > 0.0 && self.damping_min <= 1.0 && self.damping_max >= 1.0) {
            return bad("damping bounds must bracket 1");
        }
        if !(self.damping_up > 1.0 && self.damping_down > 0.0 && self.damping_down < 1.0) {
            return bad("damping_up must exceed 1 and damping_down lie in (0, 1)");
        }
        Ok(())
    }

    /// Robust scale used at the `i`-th level of `level_order`.
    pub fn scale_for(&self, i: usize) -> f64 {
        if self.huber_scale.len() == 1 {
            self.huber_scale[0]
        } else {
            self.huber_scale[i]
        }
    }

    /// Same settings with a different level schedule.
    pub fn with_levels(&self, levels: &[u32]) -> AlignConfig {
        let mut c = self.clone();
        c.huber_scale = levels
            .iter()
            .map(|s| self.level_order.iter().position(|l| l == s).map_or(self.scale_for(0), |i| self.scale_for(i)))
            .collect();
        c.level_order = levels.to_vec();
        c
    }
}

/// Uncertainty weight of a residual from the two views' uncertainties.
pub fn uncertainty_weight(u_q: f64, u_k: f64) -> f64 {
    1.0 / ((1.0 + u_q) * (1.0 + u_k))
}

/// Huber IRLS weight for a squared residual norm.
pub fn robust_weight(sq_norm: f64, gamma: f64) -> f64 {
    let n = sq_norm.sqrt();
    if n <= gamma {
        1.0
    } else {
        gamma / n
    }
}

impl RobustLoss {
    /// Robust cost of a squared norm.
    pub fn rho(self, s: f64, gamma: f64) -> f64 {
        match self {
            RobustLoss::None => s,
            RobustLoss::Huber => {
                if s <= gamma * gamma {
                    s
                } else {
                    2.0 * gamma * s.sqrt() - gamma * gamma
                }
            }
            RobustLoss::Cauchy => gamma * gamma * (s / (gamma * gamma)).ln_1p(),
        }
    }

    /// Derivative of [`RobustLoss::rho`], the IRLS weight.
    pub fn weight(self, s: f64, gamma: f64) -> f64 {
        match self {
            RobustLoss::None => 1.0,
            RobustLoss::Huber => robust_weight(s, gamma),
            RobustLoss::Cauchy => 1.0 / (1.0 + s / (gamma * gamma)),
        }
    }
}

/// A map point and its optional keyframe pixel.
pub type RefPoint = (ScenePoint, Option<Vector2<f64>>);

/// A reference keyframe and the map points it contributes. A point's
/// keyframe pixel defaults to its projection through the keyframe pose.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceView<'a> {
    pub pyramid: &'a FeaturePyramid,
    pub camera: &'a PinholeCamera,
    pub pose: &'a PoseSE3,
    pub points: &'a [RefPoint],
}

#[derive(Debug, Clone, Copy)]
pub struct QueryView<'a> {
    pub pyramid: &'a FeaturePyramid,
    pub camera: &'a PinholeCamera,
}

/// Stacked residuals of one level. Point `i` owns rows
/// `offsets[i]..offsets[i + 1]` of `residuals` and `jacobian`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSystem {
    pub residuals: Vec<f64>,
    pub jacobian: Vec<[f64; 6]>,
    pub offsets: Vec<usize>,
    /// Uncertainty weight times robust weight, per point.
    pub weights: Vec<f64>,
    pub total_cost: f64,
    pub dropped: usize,
}

impl ResidualSystem {
    pub fn num_points(&self) -> usize {
        self.weights.len()
    }

    /// `J^T W J` and `J^T W r`.
    pub fn normal_equations(&self) -> (Matrix6<f64>, Vector6<f64>) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (i, w) in self.weights.iter().enumerate() {
            for row in self.offsets[i]..self.offsets[i + 1] {
                let j = Vector6::from_column_slice(&self.jacobian[row]);
                h += *w * j * j.transpose();
                g += *w * self.residuals[row] * j;
            }
        }
        (h, g)
    }
}

struct LevelPair<'a> {
    query: &'a PyramidLevel,
    refs: Vec<&'a PyramidLevel>,
}

fn levels<'a>(stride: u32, query: &QueryView<'a>, refs: &[ReferenceView<'a>]) -> Result<LevelPair<'a>, AlignError> {
    let q = query.pyramid.level(stride).ok_or(AlignError::LevelMissing(stride))?;
    let refs = refs
        .iter()
        .map(|r| r.pyramid.level(stride).ok_or(AlignError::LevelMissing(stride)))
        .collect::<Result<Vec<_>, _>>()?;
    if refs.iter().any(|l| l.features.depth() != q.features.depth()) {
        return Err(AlignError::LevelMissing(stride));
    }
    Ok(LevelPair { query: q, refs })
}

fn evaluate(
    stride: u32,
    pose: &PoseSE3,
    query: &QueryView<'_>,
    refs: &[ReferenceView<'_>],
    gamma: f64,
    loss: RobustLoss,
    with_jacobian: bool,
) -> Result<ResidualSystem, AlignError> {
    let lv = levels(stride, query, refs)?;
    let depth = lv.query.features.depth();
    let mut sys = ResidualSystem {
        residuals: Vec::new(),
        jacobian: Vec::new(),
        offsets: vec![0],
        weights: Vec::new(),
        total_cost: 0.0,
        dropped: 0,
    };
    let mut fq = vec![0.0; depth];
    let mut fk = vec![0.0; depth];
    let mut grad = vec![[0.0; 2]; depth];
    for (r, ref_level) in refs.iter().zip(&lv.refs) {
        for (point, kf_pixel) in r.points {
            let p_cam = pose.transform_point(&point.position);
            let Ok((pq, dp)) = query.camera.project_with_pose_jacobian(&p_cam) else {
                sys.dropped += 1;
                continue;
            };
            let pk = match kf_pixel {
                Some(p) => *p,
                None => match r.camera.project(&r.pose.transform_point(&point.position)) {
                    Ok(p) => p,
                    Err(_) => {
                        sys.dropped += 1;
                        continue;
                    }
                },
            };
            if ref_level.features.sample_into(&pk, &mut fk).is_err()
                || lv.query.features.sample_with_gradient(&pq, &mut fq, &mut grad).is_err()
            {
                sys.dropped += 1;
                continue;
            }
            let (Ok(uq), Ok(uk)) = (lv.query.uncertainty_at(&pq), ref_level.uncertainty_at(&pk)) else {
                sys.dropped += 1;
                continue;
            };
            let w_unc = uncertainty_weight(uq, uk);
            let mut sq = 0.0;
            for c in 0..depth {
                let res = fq[c] - fk[c];
                sq += res * res;
                sys.residuals.push(res);
                if with_jacobian {
                    let mut row = [0.0; 6];
                    for (k, v) in row.iter_mut().enumerate() {
                        *v = grad[c][0] * dp[(0, k)] + grad[c][1] * dp[(1, k)];
                    }
                    sys.jacobian.push(row);
                }
            }
            sys.offsets.push(sys.residuals.len());
            sys.weights.push(w_unc * loss.weight(sq, gamma));
            sys.total_cost += w_unc * loss.rho(sq, gamma);
        }
    }
    if sys.weights.is_empty() {
        return Err(AlignError::NoValidPoints(stride));
    }
    Ok(sys)
}

/// Residuals, Jacobian with respect to a left perturbation of the query
/// pose, and IRLS weights at one level.
pub fn build_residual_system(
    stride: u32,
    pose: &PoseSE3,
    query: &QueryView<'_>,
    refs: &[ReferenceView<'_>],
    gamma: f64,
    loss: RobustLoss,
) -> Result<ResidualSystem, AlignError> {
    evaluate(stride, pose, query, refs, gamma, loss, true)
}

/// Weighted robust feature-metric cost at one level.
pub fn feature_metric_cost(
    stride: u32,
    pose: &PoseSE3,
    query: &QueryView<'_>,
    refs: &[ReferenceView<'_>],
    gamma: f64,
    loss: RobustLoss,
) -> Result<f64, AlignError> {
    evaluate(stride, pose, query, refs, gamma, loss, false).map(|s| s.total_cost)
}

/// Solves `(H + diag(lambda) diag(H)) delta = J^T W r`.
pub fn lm_step(system: &ResidualSystem, lambda: &Vector6<f64>) -> Result<Tangent, AlignError> {
    let (h, g) = system.normal_equations();
    solve_damped(&h, &g, lambda)
}

fn solve_damped(h: &Matrix6<f64>, g: &Vector6<f64>, lambda: &Vector6<f64>) -> Result<Tangent, AlignError> {
    if !h.iter().chain(g.iter()).all(|v| v.is_finite()) {
        return Err(AlignError::SingularSystem);
    }
    let mut lambda = *lambda;
    for _ in 0..=CHOLESKY_RETRIES {
        let mut a = *h;
        for i in 0..6 {
            a[(i, i)] += lambda[i] * h[(i, i)];
        }
        if let Some(chol) = Cholesky::new(a) {
            let delta = chol.solve(g);
            if delta.iter().all(|v| v.is_finite()) {
                return Ok(delta);
            }
        }
        lambda *= 10.0;
    }
    Err(AlignError::SingularSystem)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelStats {
    pub stride: u32,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignResult {
    pub pose: PoseSE3,
    pub levels: Vec<LevelStats>,
    pub points_used: usize,
}

impl AlignResult {
    /// True when the finest level reached the step tolerance.
    pub fn converged(&self) -> bool {
        self.levels.last().is_some_and(|l| l.converged)
    }
}

/// Levenberg-Marquardt at one level, starting from `init`.
pub fn optimize_level(
    stride: u32,
    gamma: f64,
    init: &PoseSE3,
    query: &QueryView<'_>,
    refs: &[ReferenceView<'_>],
    config: &AlignConfig,
) -> Result<(PoseSE3, LevelStats), AlignError> {
    let base = Vector6::from_column_slice(&config.damping);
    let loss = config.robust_loss;
    let mut pose = *init;
    let mut sys = build_residual_system(stride, &pose, query, refs, gamma, loss)?;
    let mut stats = LevelStats {
        stride,
        initial_cost: sys.total_cost,
        final_cost: sys.total_cost,
        iterations: 0,
        converged: false,
        points: sys.num_points(),
    };
    let (mut h, mut g) = sys.normal_equations();
    let mut mu = 1.0;
    while stats.iterations < config.max_iters_per_level {
        stats.iterations += 1;
        let Ok(delta) = solve_damped(&h, &g, &(base * mu)) else { break };
        let small = delta.norm() < config.step_tol;
        let candidate = PoseSE3::exp(&-delta).compose(&pose);
        let next = build_residual_system(stride, &candidate, query, refs, gamma, loss);
        match next {
            Ok(next) if next.total_cost < sys.total_cost => {
                pose = candidate;
                sys = next;
                (h, g) = sys.normal_equations();
                mu = (mu * config.damping_down).max(config.damping_min);
            }
            _ => {
                mu *= config.damping_up;
            }
        }
        if small {
            stats.converged = true;
            break;
        }
        if mu > config.damping_max {
            break;
        }
    }
    stats.final_cost = sys.total_cost;
    stats.points = sys.num_points();
    Ok((pose, stats))
}

/// Runs [`optimize_level`] over `config.level_order`, each level seeded by
/// the previous one.
pub fn optimize_pyramid(
    init: &PoseSE3,
    query: &QueryView<'_>,
    refs: &[ReferenceView<'_>],
    config: &AlignConfig,
) -> Result<AlignResult, AlignError> {
    config.validate()?;
    let mut pose = *init;
    let mut levels = Vec::with_capacity(config.level_order.len());
    for (i, &stride) in config.level_order.iter().enumerate() {
        let (p, stats) = optimize_level(stride, config.scale_for(i), &pose, query, refs, config)?;
        pose = p;
        levels.push(stats);
    }
    let points_used = levels.last().map_or(0, |l| l.points);
    Ok(AlignResult { pose, levels, points_used })
}
