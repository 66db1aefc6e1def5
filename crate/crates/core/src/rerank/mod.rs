//! Sparse-to-dense hypercolumn matching and candidate re-ranking.
//!
//! Each keyframe observation is turned into a hypercolumn descriptor and
//! correlated densely against the query hypercolumn. The correlation peak,
//! if it passes the ratio test, gives a 2D-3D match. Candidates are then
//! ordered by the number of PnP-RANSAC inliers.

pub mod p3p;
pub mod pnp;

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::feature::{FeatureError, Hypercolumn};
use crate::geometry::PinholeCamera;
use crate::scene_map::{MapError, ScenePoint};

pub use pnp::{pnp_ransac, pnp_ransac_salted, refine_pose, PnPResult, PnpError, RansacConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2D3D {
    pub point_id: u64,
    pub world: Vector3<f64>,
    pub query_pixel: Vector2<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub exclusion_radius_texels: f64,
    pub ratio_threshold: f64,
    /// Keep only the highest-scoring match per query texel.
    pub unique_query_texels: bool,
    pub ransac: RansacConfig,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            exclusion_radius_texels: 4.0,
            ratio_threshold: 0.9,
            unique_query_texels: true,
            ransac: RansacConfig::default(),
        }
    }
}

/// Hypercolumn descriptor of one keyframe observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDescriptor {
    pub point_id: u64,
    pub world: Vector3<f64>,
    pub descriptor: Vec<f32>,
}

/// Samples the keyframe hypercolumn at each observation and renormalizes
/// every block. Observations outside the grid are skipped and their point
/// ids returned in the second list.
pub fn sample_sparse_descriptors(
    h_k: &Hypercolumn,
    observations: &[(ScenePoint, Vector2<f64>)],
) -> (Vec<SparseDescriptor>, Vec<u64>) {
    let mut out = Vec::with_capacity(observations.len());
    let mut skipped = Vec::new();
    let mut buf = vec![0.0; h_k.depth()];
    for (point, pixel) in observations {
        if h_k.map().sample_into(pixel, &mut buf).is_err() {
            skipped.push(point.id);
            continue;
        }
        let mut descriptor: Vec<f32> = buf.iter().map(|v| *v as f32).collect();
        h_k.normalize_blocks(&mut descriptor);
        out.push(SparseDescriptor { point_id: point.id, world: point.position, descriptor });
    }
    (out, skipped)
}

/// Per-texel dot products, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl CorrelationMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

pub fn correlate(h_q: &Hypercolumn, d: &[f32]) -> Result<CorrelationMap, FeatureError> {
    let map = h_q.map();
    if d.len() != map.depth() {
        return Err(FeatureError::DepthMismatch { expected: map.depth(), found: d.len() });
    }
    let data = map
        .data()
        .chunks_exact(map.depth())
        .map(|t| t.iter().zip(d).map(|(a, b)| *a * *b).sum::<f32>() as f64)
        .collect();
    Ok(CorrelationMap { width: map.width(), height: map.height(), data })
}

/// Global maximum of the map, accepted if the best value outside the
/// exclusion disk is at most `ratio_threshold` times the peak.
pub fn best_match_with_ratio(
    corr: &CorrelationMap,
    exclusion_radius_texels: f64,
    ratio_threshold: f64,
) -> Option<((usize, usize), f64)> {
    let (mut best_i, mut m1) = (0usize, f64::NEG_INFINITY);
    for (i, v) in corr.data.iter().enumerate() {
        if *v > m1 {
            m1 = *v;
            best_i = i;
        }
    }
    if !(m1 > 0.0) {
        return None;
    }
    let (bx, by) = (best_i % corr.width, best_i / corr.width);
    let r2 = exclusion_radius_texels * exclusion_radius_texels;
    let mut m2 = f64::NEG_INFINITY;
    for y in 0..corr.height {
        for x in 0..corr.width {
            let dx = x as f64 - bx as f64;
            let dy = y as f64 - by as f64;
            if dx * dx + dy * dy > r2 {
                m2 = m2.max(corr.at(x, y));
            }
        }
    }
    (m2 / m1 <= ratio_threshold || m2 == f64::NEG_INFINITY).then_some(((bx, by), m1))
}

pub fn match_sparse_to_dense(
    h_q: &Hypercolumn,
    sparse: &[SparseDescriptor],
    config: &RerankConfig,
) -> Result<Vec<Match2D3D>, FeatureError> {
    let stride = h_q.stride() as f64;
    let mut out = Vec::new();
    let mut texels = Vec::new();
    for s in sparse {
        let corr = correlate(h_q, &s.descriptor)?;
        if let Some(((x, y), score)) =
            best_match_with_ratio(&corr, config.exclusion_radius_texels, config.ratio_threshold)
        {
            texels.push(y * corr.width + x);
            out.push(Match2D3D {
                point_id: s.point_id,
                world: s.world,
                query_pixel: Vector2::new(x as f64 * stride, y as f64 * stride),
                score,
            });
        }
    }
    if !config.unique_query_texels {
        return Ok(out);
    }
    let mut winner: HashMap<usize, usize> = HashMap::new();
    for (i, t) in texels.iter().enumerate() {
        let w = winner.entry(*t).or_insert(i);
        if out[i].score > out[*w].score {
            *w = i;
        }
    }
    Ok(out.into_iter().enumerate().filter(|(i, _)| winner[&texels[*i]] == *i).map(|(_, m)| m).collect())
}

/// One retrieved keyframe offered for re-ranking: its hypercolumn and the
/// observations to describe.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub keyframe_id: u64,
    pub hypercolumn: &'a Hypercolumn,
    pub observations: &'a [(ScenePoint, Vector2<f64>)],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateDiagnostics {
    pub keyframe_id: u64,
    pub retrieval_rank: usize,
    pub descriptors: usize,
    pub skipped_observations: usize,
    pub matches: usize,
    pub inliers: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    /// Successful candidates, most inliers first, ties in retrieval order.
    pub ranking: Vec<(u64, PnPResult)>,
    /// Candidates without a PnP model, in retrieval order.
    pub failed: Vec<u64>,
    /// One entry per candidate, in retrieval order.
    pub diagnostics: Vec<CandidateDiagnostics>,
}

impl RerankOutcome {
    pub fn best(&self) -> Option<&(u64, PnPResult)> {
        self.ranking.first()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("no candidates to re-rank")]
    NoCandidates,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Matches every candidate against the query and orders them by PnP inliers.
/// Candidates are given in retrieval order.
pub fn rerank_candidates(
    query_hyp: &Hypercolumn,
    candidates: &[Candidate<'_>],
    camera: &PinholeCamera,
    config: &RerankConfig,
) -> Result<RerankOutcome, RerankError> {
    if candidates.is_empty() {
        return Err(RerankError::NoCandidates);
    }
    let per: Vec<(CandidateDiagnostics, Option<PnPResult>)> = candidates
        .par_iter()
        .enumerate()
        .map(|(rank, c)| -> Result<_, FeatureError> {
            let (sparse, skipped) = sample_sparse_descriptors(c.hypercolumn, c.observations);
            let matches = match_sparse_to_dense(query_hyp, &sparse, config)?;
            let pnp = pnp_ransac_salted(&matches, camera, &config.ransac, c.keyframe_id);
            let mut diag = CandidateDiagnostics {
                keyframe_id: c.keyframe_id,
                retrieval_rank: rank,
                descriptors: sparse.len(),
                skipped_observations: skipped.len(),
                matches: matches.len(),
                inliers: 0,
                failure: None,
            };
            Ok(match pnp {
                Ok(r) => {
                    diag.inliers = r.num_inliers;
                    (diag, Some(r))
                }
                Err(e) => {
                    diag.failure = Some(e.to_string());
                    (diag, None)
                }
            })
        })
        .collect::<Result<_, _>>()?;

    let mut ranking = Vec::new();
    let mut failed = Vec::new();
    let mut diagnostics = Vec::with_capacity(per.len());
    for (diag, result) in per {
        match result {
            Some(r) => ranking.push((diag.retrieval_rank, diag.keyframe_id, r)),
            None => failed.push(diag.keyframe_id),
        }
        diagnostics.push(diag);
    }
    ranking.sort_by(|a, b| b.2.num_inliers.cmp(&a.2.num_inliers).then(a.0.cmp(&b.0)));
    Ok(RerankOutcome { ranking: ranking.into_iter().map(|(_, id, r)| (id, r)).collect(), failed, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{build_hypercolumn, FeatureMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hyp(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Hypercolumn {
        let a: Vec<f32> = (0..w * h * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = FeatureMap::new(w, h, 4, 4, a).unwrap();
        let b = FeatureMap::new(w, h, 3, 4, b).unwrap();
        build_hypercolumn(&[&a, &b]).unwrap()
    }

    fn corr(w: usize, h: usize, data: Vec<f64>) -> CorrelationMap {
        CorrelationMap { width: w, height: h, data }
    }

    #[test]
    fn ratio_test_examples() {
        let mut d = vec![0.0; 100];
        d[0] = 1.0;
        d[99] = 0.5;
        assert_eq!(best_match_with_ratio(&corr(10, 10, d.clone()), 4.0, 0.9), Some(((0, 0), 1.0)));
        d[99] = 0.95;
        assert_eq!(best_match_with_ratio(&corr(10, 10, d), 4.0, 0.9), None);
        assert_eq!(best_match_with_ratio(&corr(10, 10, vec![0.3; 100]), 4.0, 0.9), None);
        assert_eq!(best_match_with_ratio(&corr(2, 1, vec![-1.0, -2.0]), 4.0, 0.9), None);
    }

    #[test]
    fn ratio_test_ties_pick_row_major_first() {
        let mut d = vec![0.0; 100];
        d[15] = 1.0;
        d[16] = 1.0;
        assert_eq!(best_match_with_ratio(&corr(10, 10, d), 4.0, 0.9).unwrap().0, (5, 1));
    }

    #[test]
    fn ratio_threshold_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            let c = corr(8, 8, d);
            let mut accepted_before = false;
            for t in [0.5, 0.7, 0.8, 0.9, 0.95, 1.0] {
                let acc = best_match_with_ratio(&c, 2.0, t).is_some();
                assert!(acc || !accepted_before);
                accepted_before = acc;
            }
        }
    }

    #[test]
    fn correlate_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_hyp(&mut rng, 6, 5);
        let d: Vec<f32> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = correlate(&h, &d).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let t = h.map().texel(x, y);
                let brute: f64 = t.iter().zip(&d).map(|(a, b)| *a as f64 * *b as f64).sum();
                assert!((c.at(x, y) - brute).abs() < 1e-5);
            }
        }
        assert!(correlate(&h, &d[..3]).is_err());
    }

    #[test]
    fn self_correlation_equals_block_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_hyp(&mut rng, 6, 5);
        let d = h.map().texel(2, 3).to_vec();
        let c = correlate(&h, &d).unwrap();
        assert!((c.at(2, 3) - 2.0).abs() < 1e-5);
    }

    #[test]
    fn identity_matching_and_sparse_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_hyp(&mut rng, 12, 10);
        let obs: Vec<(ScenePoint, Vector2<f64>)> = (0..30)
            .map(|i| {
                let px = Vector2::new(4.0 * rng.random_range(0..12) as f64, 4.0 * rng.random_range(0..10) as f64);
                (ScenePoint { id: i, position: Vector3::new(i as f64, 0.0, 0.0) }, px)
            })
            .collect();
        let (sparse, skipped) = sample_sparse_descriptors(&h, &obs);
        assert!(skipped.is_empty());
        for s in &sparse {
            for block in [&s.descriptor[..4], &s.descriptor[4..]] {
                let n: f32 = block.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        let cfg = RerankConfig { ratio_threshold: 1.0, unique_query_texels: false, ..Default::default() };
        let matches = match_sparse_to_dense(&h, &sparse, &cfg).unwrap();
        assert_eq!(matches.len(), 30);
        for (m, (_, px)) in matches.iter().zip(&obs) {
            assert_eq!(m.query_pixel, *px);
        }
        let (none, _) = sample_sparse_descriptors(&h, &[]);
        assert!(none.is_empty());
        let (_, skipped) = sample_sparse_descriptors(&h, &[(obs[0].0, Vector2::new(-10.0, 0.0))]);
        assert_eq!(skipped, vec![0]);
    }

    #[test]
    fn unique_texels_keep_best_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_hyp(&mut rng, 12, 10);
        let d = h.map().texel(3, 4).to_vec();
        let scaled: Vec<f32> = d.iter().map(|v| v * 0.5).collect();
        let other = h.map().texel(9, 1).to_vec();
        let sparse = vec![
            SparseDescriptor { point_id: 1, world: Vector3::zeros(), descriptor: scaled },
            SparseDescriptor { point_id: 2, world: Vector3::zeros(), descriptor: d },
            SparseDescriptor { point_id: 3, world: Vector3::zeros(), descriptor: other },
        ];
        let all = RerankConfig { ratio_threshold: 1.0, unique_query_texels: false, ..Default::default() };
        assert_eq!(match_sparse_to_dense(&h, &sparse, &all).unwrap().len(), 3);
        let unique = RerankConfig { ratio_threshold: 1.0, ..Default::default() };
        let ids: Vec<u64> = match_sparse_to_dense(&h, &sparse, &unique).unwrap().iter().map(|m| m.point_id).collect();
        assert_eq!(ids, vec![2, 3]);
    }

    #[test]
    fn orthogonal_descriptors_give_no_matches() {
        let a = FeatureMap::new(4, 4, 2, 4, [1.0f32, 0.0].repeat(16)).unwrap();
        let h = build_hypercolumn(&[&a]).unwrap();
        let sparse = vec![SparseDescriptor { point_id: 1, world: Vector3::zeros(), descriptor: vec![0.0, 1.0] }];
        assert!(match_sparse_to_dense(&h, &sparse, &RerankConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn all_failures_give_empty_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_hyp(&mut rng, 6, 5);
        let cam = PinholeCamera::new(10.0, 10.0, 10.0, 8.0, 21, 17).unwrap();
        let none: Vec<(ScenePoint, Vector2<f64>)> = vec![];
        let cands = [
            Candidate { keyframe_id: 3, hypercolumn: &h, observations: &none },
            Candidate { keyframe_id: 1, hypercolumn: &h, observations: &none },
        ];
        let out = rerank_candidates(&h, &cands, &cam, &RerankConfig::default()).unwrap();
        assert!(out.ranking.is_empty());
        assert_eq!(out.failed, vec![3, 1]);
        assert_eq!(out.diagnostics.len(), 2);
        assert!(out.diagnostics[0].failure.is_some());
        assert!(matches!(rerank_candidates(&h, &[], &cam, &RerankConfig::default()), Err(RerankError::NoCandidates)));
    }
}
