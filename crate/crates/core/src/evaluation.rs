//! Pose metrics, recall tables and the localization pipeline in its three
//! configurations:
//!
//! * `ra`: retrieval, then alignment from the top keyframe's pose;
//! * `rp`: retrieval, re-ranking, PnP pose;
//! * `rpa`: retrieval, re-ranking, PnP pose refined by alignment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{optimize_pyramid, AlignConfig, PointSource, QueryView, RefPoint, ReferenceView};
use crate::feature::{build_hypercolumn, load_pyramid, FeatureError, FeatureMap, FeaturePyramid, Hypercolumn};
use crate::geometry::{pose_error, PinholeCamera, PoseSE3};
use crate::rerank::{rerank_candidates, Candidate, RerankConfig};
use crate::retrieval::{load_descriptor, rank_keyframes, top_k, GlobalDescriptor, RetrievalError};
use crate::scene_map::{load_map_with_tolerance, SceneMap, ScenePoint};
use crate::synth::{
    keyframe_descriptor_path, keyframe_pyramid_path, load_oracle, query_descriptor_path, query_pyramid_path, Oracle,
    SynthBenchmark, SynthConfig, SynthError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no outcomes to evaluate")]
    EmptyInput,
    #[error("no point projects in front of both poses")]
    NoValidPoints,
    #[error("thresholds must be strictly increasing in both components: {0}")]
    BadThresholds(String),
    #[error("{path}: {source}")]
    File { path: String, source: Box<dyn std::error::Error + Send + Sync> },
    #[error("results schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn file_err(path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> EvalError {
    EvalError::File { path: path.display().to_string(), source: Box::new(e) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ra,
    Rp,
    Rpa,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ra, Mode::Rp, Mode::Rpa];

    /// Label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Ra => "R+A",
            Mode::Rp => "R+P",
            Mode::Rpa => "R+P+A",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ra => "ra",
            Mode::Rp => "rp",
            Mode::Rpa => "rpa",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ra" => Ok(Mode::Ra),
            "rp" => Ok(Mode::Rp),
            "rpa" => Ok(Mode::Rpa),
            other => Err(format!("unknown mode '{other}', expected ra, rp or rpa")),
        }
    }
}

/// (translation in scene units, rotation in degrees) pairs, tightest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds(pub Vec<(f64, f64)>);

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds(vec![(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)])
    }
}

impl Thresholds {
    pub fn new(levels: Vec<(f64, f64)>) -> Result<Self, EvalError> {
        let t = Thresholds(levels);
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let ok = !self.0.is_empty()
            && self.0.iter().all(|(a, b)| *a > 0.0 && *b > 0.0)
            && self.0.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1);
        if ok {
            Ok(())
        } else {
            Err(EvalError::BadThresholds(format!("{:?}", self.0)))
        }
    }

    /// Localized within level `i`, inclusive at the boundary.
    pub fn within(&self, i: usize, trans: f64, rot: f64) -> bool {
        trans <= self.0[i].0 && rot <= self.0[i].1
    }
}

impl FromStr for Thresholds {
    type Err = EvalError;

    /// Parses `"0.25,2;0.5,5;5,10"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvalError::BadThresholds(s.to_string());
        let levels = s
            .split(';')
            .map(|pair| {
                let (a, b) = pair.split_once(',').ok_or_else(bad)?;
                Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Thresholds::new(levels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: u64,
    pub mode: Mode,
    pub est_pose: Option<PoseSE3>,
    pub gt_pose: Option<PoseSE3>,
    pub trans_err: Option<f64>,
    pub rot_err: Option<f64>,
    /// Retrieved keyframes, best first.
    pub retrieved: Vec<u64>,
    /// Keyframe whose pose or matches produced the estimate.
    pub keyframe: Option<u64>,
    pub inliers: Option<usize>,
    pub converged: Option<bool>,
    pub failure: Option<String>,
}

impl QueryOutcome {
    fn failed(query_id: u64, mode: Mode, gt_pose: Option<PoseSE3>, reason: String) -> Self {
        QueryOutcome {
            query_id,
            mode,
            est_pose: None,
            gt_pose,
            trans_err: None,
            rot_err: None,
            retrieved: Vec::new(),
            keyframe: None,
            inliers: None,
            converged: None,
            failure: Some(reason),
        }
    }

    pub fn errors(&self) -> Option<(f64, f64)> {
        Some((self.trans_err?, self.rot_err?))
    }
}

/// Mean Huber cost of the pixel offsets between projections under `est`
/// and `gt`. Points behind either camera are skipped.
pub fn reprojection_loss(
    est: &PoseSE3,
    gt: &PoseSE3,
    points: &[Vector3<f64>],
    camera: &PinholeCamera,
    gamma_px: f64,
) -> Result<f64, EvalError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in points {
        let (Ok(a), Ok(b)) = (camera.project(&est.transform_point(p)), camera.project(&gt.transform_point(p))) else {
            continue;
        };
        let e = (a - b).norm();
        total += if e <= gamma_px { 0.5 * e * e } else { gamma_px * (e - 0.5 * gamma_px) };
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::NoValidPoints);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub thresholds: Vec<(f64, f64)>,
    pub total: usize,
    pub localized: Vec<usize>,
    pub percentages: Vec<f64>,
}

impl RecallReport {
    /// Percentages as `"a / b / c"` with one decimal.
    pub fn summary(&self) -> String {
        self.percentages.iter().map(|p| format!("{p:.1}")).collect::<Vec<_>>().join(" / ")
    }
}

/// Recall from per-query errors; `None` marks a failed query.
pub fn recall_from_errors(errors: &[Option<(f64, f64)>], thresholds: &Thresholds) -> Result<RecallReport, EvalError> {
    thresholds.validate()?;
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let localized: Vec<usize> = (0..thresholds.0.len())
        .map(|i| errors.iter().flatten().filter(|(t, r)| thresholds.within(i, *t, *r)).count())
        .collect();
    let total = errors.len();
    Ok(RecallReport {
        thresholds: thresholds.0.clone(),
        total,
        percentages: localized.iter().map(|c| 100.0 * *c as f64 / total as f64).collect(),
        localized,
    })
}

pub fn recall(outcomes: &[QueryOutcome], thresholds: &Thresholds) -> Result<RecallReport, EvalError> {
    let errors: Vec<_> = outcomes.iter().map(|o| o.errors()).collect();
    recall_from_errors(&errors, thresholds)
}

pub fn recall_by_mode(
    outcomes: &[QueryOutcome],
    thresholds: &Thresholds,
) -> Result<BTreeMap<Mode, RecallReport>, EvalError> {
    let mut out = BTreeMap::new();
    for mode in Mode::ALL {
        let subset: Vec<_> = outcomes.iter().filter(|o| o.mode == mode).cloned().collect();
        if !subset.is_empty() {
            out.insert(mode, recall(&subset, thresholds)?);
        }
    }
    if out.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub top_k: usize,
    /// Pyramid strides concatenated into matching hypercolumns.
    pub hypercolumn_strides: Vec<u32>,
    pub seed: u64,
    pub rerank: RerankConfig,
    pub align: AlignConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            hypercolumn_strides: vec![4, 16],
            seed: 0,
            rerank: RerankConfig::default(),
            align: AlignConfig::default(),
        }
    }
}

/// Map, features and descriptors needed to localize queries.
#[derive(Debug, Clone)]
pub struct LocalizationInputs {
    pub map: SceneMap,
    pub query_camera: PinholeCamera,
    pub keyframe_pyramids: BTreeMap<u64, FeaturePyramid>,
    pub keyframe_descriptors: BTreeMap<u64, GlobalDescriptor>,
    pub query_pyramids: BTreeMap<u64, FeaturePyramid>,
    pub query_descriptors: BTreeMap<u64, GlobalDescriptor>,
}

impl LocalizationInputs {
    pub fn from_benchmark(bench: &SynthBenchmark) -> Self {
        Self {
            map: bench.map.clone(),
            query_camera: bench.world.camera,
            keyframe_pyramids: bench.keyframe_pyramids.clone(),
            keyframe_descriptors: bench.keyframe_descriptors.clone(),
            query_pyramids: bench.query_pyramids.clone(),
            query_descriptors: bench.query_descriptors.clone(),
        }
    }

    /// Loads a benchmark directory written by [`crate::synth::write_benchmark`].
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Oracle), EvalError> {
        let dir = dir.as_ref();
        let cfg_path = dir.join("synth_config.toml");
        let obs_tol = match std::fs::read_to_string(&cfg_path) {
            Ok(text) => {
                toml::from_str::<SynthConfig>(&text).map_err(|e| file_err(&cfg_path, e))?.observation_tolerance()
            }
            Err(_) => crate::scene_map::DEFAULT_OBS_TOL,
        };
        let map_path = dir.join("map.json");
        let map = load_map_with_tolerance(&map_path, obs_tol).map_err(|e| file_err(&map_path, e))?;
        let oracle_path = dir.join("oracle.json");
        let oracle = load_oracle(&oracle_path).map_err(|e: SynthError| file_err(&oracle_path, e))?;
        let query_camera =
            *map.cameras.values().next().ok_or_else(|| EvalError::Schema("map has no cameras".into()))?;
        let pyr = |p: std::path::PathBuf| load_pyramid(&p).map_err(|e: FeatureError| file_err(&p, e));
        let desc = |p: std::path::PathBuf| load_descriptor(&p).map_err(|e: RetrievalError| file_err(&p, e));
        let mut inputs = Self {
            query_camera,
            keyframe_pyramids: BTreeMap::new(),
            keyframe_descriptors: BTreeMap::new(),
            query_pyramids: BTreeMap::new(),
            query_descriptors: BTreeMap::new(),
            map,
        };
        for kf in &inputs.map.keyframes {
            inputs.keyframe_pyramids.insert(kf.id, pyr(keyframe_pyramid_path(dir, kf.id))?);
            inputs.keyframe_descriptors.insert(kf.id, desc(keyframe_descriptor_path(dir, kf.id))?);
        }
        for q in &oracle.queries {
            inputs.query_pyramids.insert(q.id, pyr(query_pyramid_path(dir, q.id))?);
            inputs.query_descriptors.insert(q.id, desc(query_descriptor_path(dir, q.id))?);
        }
        Ok((inputs, oracle))
    }
}

/// Hypercolumn of a pyramid at the given strides, after per-image channel
/// centring.
pub fn pyramid_hypercolumn(pyramid: &FeaturePyramid, strides: &[u32]) -> Result<Hypercolumn, FeatureError> {
    let maps: Vec<FeatureMap> = strides
        .iter()
        .map(|s| {
            pyramid
                .level(*s)
                .map(|l| l.features.center_channels())
                .ok_or_else(|| FeatureError::Invalid(format!("pyramid has no stride {s}")))
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&FeatureMap> = maps.iter().collect();
    build_hypercolumn(&refs)
}

/// Inputs plus the per-keyframe data every query reuses.
pub struct Localizer {
    pub inputs: LocalizationInputs,
    pub config: PipelineConfig,
    keyframe_hypercolumns: BTreeMap<u64, Hypercolumn>,
    keyframe_observations: BTreeMap<u64, Vec<(ScenePoint, Vector2<f64>)>>,
    keyframe_points: BTreeMap<u64, Vec<RefPoint>>,
}

impl Localizer {
    pub fn new(inputs: LocalizationInputs, config: PipelineConfig) -> Result<Self, EvalError> {
        config.align.validate().map_err(|e| EvalError::Schema(e.to_string()))?;
        config.rerank.ransac.validate().map_err(|e| EvalError::Schema(e.to_string()))?;
        if config.top_k == 0 {
            return Err(EvalError::Schema("top_k must be at least 1".into()));
        }
        let ids: Vec<u64> = inputs.map.keyframes.iter().map(|k| k.id).collect();
        let hyps: Vec<(u64, Hypercolumn)> = ids
            .par_iter()
            .map(|id| {
                let p = inputs
                    .keyframe_pyramids
                    .get(id)
                    .ok_or_else(|| EvalError::Schema(format!("no pyramid for keyframe {id}")))?;
                let h = pyramid_hypercolumn(p, &config.hypercolumn_strides)
                    .map_err(|e| EvalError::Schema(format!("keyframe {id}: {e}")))?;
                Ok((*id, h))
            })
            .collect::<Result<_, EvalError>>()?;
        let mut keyframe_observations = BTreeMap::new();
        let mut keyframe_points = BTreeMap::new();
        for id in &ids {
            let obs = inputs.map.visible_points(*id).map_err(|e| EvalError::Schema(e.to_string()))?;
            keyframe_points.insert(*id, obs.iter().map(|(p, _)| (*p, None)).collect());
            keyframe_observations.insert(*id, obs);
        }
        Ok(Self {
            inputs,
            config,
            keyframe_hypercolumns: hyps.into_iter().collect(),
            keyframe_observations,
            keyframe_points,
        })
    }

    fn align(
        &self,
        query_pyr: &FeaturePyramid,
        init: &PoseSE3,
        keyframes: &[u64],
    ) -> Result<crate::align::AlignResult, String> {
        let q = QueryView { pyramid: query_pyr, camera: &self.inputs.query_camera };
        let mut refs = Vec::with_capacity(keyframes.len());
        for id in keyframes {
            let kf = self.inputs.map.keyframe(*id).ok_or(format!("unknown keyframe {id}"))?;
            refs.push(ReferenceView {
                pyramid: &self.inputs.keyframe_pyramids[id],
                camera: self.inputs.map.camera(kf.camera_id).ok_or("keyframe camera missing")?,
                pose: &kf.pose,
                points: &self.keyframe_points[id],
            });
        }
        optimize_pyramid(init, &q, &refs, &self.config.align).map_err(|e| format!("alignment: {e}"))
    }

    /// Localizes one query. Stage failures are reported in the outcome.
    pub fn localize(&self, query_id: u64, gt_pose: Option<PoseSE3>, mode: Mode) -> QueryOutcome {
        let mut out = QueryOutcome::failed(query_id, mode, gt_pose, String::new());
        out.failure = None;
        let fail = |mut o: QueryOutcome, reason: String| {
            o.failure = Some(reason);
            o
        };
        let (Some(desc), Some(pyr)) =
            (self.inputs.query_descriptors.get(&query_id), self.inputs.query_pyramids.get(&query_id))
        else {
            return fail(out, format!("no features for query {query_id}"));
        };
        let ranking = match rank_keyframes(desc, &self.inputs.keyframe_descriptors) {
            Ok(r) => r,
            Err(e) => return fail(out, format!("retrieval: {e}")),
        };
        let retrieved: Vec<u64> = top_k(&ranking, self.config.top_k).into_iter().map(|(id, _)| id).collect();
        out.retrieved = retrieved.clone();
        if retrieved.is_empty() {
            return fail(out, "retrieval returned no candidates".into());
        }

        let pnp_stage = |out: &mut QueryOutcome| -> Result<(u64, PoseSE3), String> {
            let hq = pyramid_hypercolumn(pyr, &self.config.hypercolumn_strides).map_err(|e| format!("query: {e}"))?;
            let cands: Vec<Candidate<'_>> = retrieved
                .iter()
                .map(|id| Candidate {
                    keyframe_id: *id,
                    hypercolumn: &self.keyframe_hypercolumns[id],
                    observations: &self.keyframe_observations[id],
                })
                .collect();
            let mut rerank = self.config.rerank.clone();
            rerank.ransac.rng_seed = crate::synth::derive_seed(&[self.config.seed, query_id]);
            let ranked = rerank_candidates(&hq, &cands, &self.inputs.query_camera, &rerank)
                .map_err(|e| format!("re-ranking: {e}"))?;
            let (kf, res) = ranked.best().ok_or("PnP failed for every candidate")?;
            out.inliers = Some(res.num_inliers);
            out.keyframe = Some(*kf);
            Ok((*kf, res.pose))
        };

        let align_set = |top: u64| -> Vec<u64> {
            match self.config.align.point_source {
                PointSource::TopKeyframeObs => vec![top],
                PointSource::AllCandidateObs => retrieved.clone(),
            }
        };

        let est = match mode {
            Mode::Ra => {
                let top = retrieved[0];
                out.keyframe = Some(top);
                let init = self.inputs.map.keyframe(top).map(|k| k.pose).expect("retrieved keyframe exists");
                match self.align(pyr, &init, &align_set(top)) {
                    Ok(r) => {
                        out.converged = Some(r.converged());
                        r.pose
                    }
                    Err(e) => return fail(out, e),
                }
            }
            Mode::Rp => match pnp_stage(&mut out) {
                Ok((_, pose)) => pose,
                Err(e) => return fail(out, e),
            },
            Mode::Rpa => {
                let (kf, init) = match pnp_stage(&mut out) {
                    Ok(v) => v,
                    Err(e) => return fail(out, e),
                };
                match self.align(pyr, &init, &align_set(kf)) {
                    Ok(r) => {
                        out.converged = Some(r.converged());
                        r.pose
                    }
                    Err(e) => return fail(out, e),
                }
            }
        };
        out.est_pose = Some(est);
        if let Some(gt) = gt_pose {
            let (t, r) = pose_error(&est, &gt);
            out.trans_err = Some(t);
            out.rot_err = Some(r);
        }
        out
    }

    /// Localizes every query on a pool of `threads` workers (0 picks the
    /// default). Results come back in input order.
    pub fn localize_all(
        &self,
        queries: &[(u64, Option<PoseSE3>)],
        mode: Mode,
        threads: usize,
    ) -> Result<Vec<QueryOutcome>, EvalError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| EvalError::Schema(format!("thread pool: {e}")))?;
        Ok(pool.install(|| queries.par_iter().map(|(id, gt)| self.localize(*id, *gt, mode)).collect()))
    }
}

/// Localizes every oracle query of a generated benchmark in memory.
pub fn run_benchmark(
    bench: &SynthBenchmark,
    mode: Mode,
    config: &PipelineConfig,
    threads: usize,
) -> Result<Vec<QueryOutcome>, EvalError> {
    let loc = Localizer::new(LocalizationInputs::from_benchmark(bench), config.clone())?;
    let queries: Vec<_> = bench.oracle.queries.iter().map(|q| (q.id, Some(q.gt_pose))).collect();
    loc.localize_all(&queries, mode, threads)
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRow {
    pub query_id: u64,
    pub mode: Mode,
    pub localized_25: u8,
    pub localized_50: u8,
    pub localized_500: u8,
    pub trans_err: Option<f64>,
    pub rot_err: Option<f64>,
    pub inliers: Option<usize>,
    pub converged: Option<bool>,
}

pub const RESULTS_HEADER: &str =
    "query_id,mode,localized_25,localized_50,localized_500,trans_err,rot_err,inliers,converged";

impl ResultRow {
    pub fn from_outcome(o: &QueryOutcome) -> Self {
        let t = Thresholds::default();
        let hit = |i: usize| o.errors().is_some_and(|(a, b)| t.within(i, a, b)) as u8;
        ResultRow {
            query_id: o.query_id,
            mode: o.mode,
            localized_25: hit(0),
            localized_50: hit(1),
            localized_500: hit(2),
            trans_err: o.trans_err,
            rot_err: o.rot_err,
            inliers: o.inliers,
            converged: o.converged,
        }
    }

    pub fn errors(&self) -> Option<(f64, f64)> {
        Some((self.trans_err?, self.rot_err?))
    }
}

pub fn write_results(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| file_err(path, e))?;
    if rows.is_empty() {
        w.write_record(RESULTS_HEADER.split(',')).map_err(|e| file_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| file_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>, EvalError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| file_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| file_err(path, e))?.iter().map(String::from).collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(EvalError::Schema(format!("{}: unexpected header '{}'", path.display(), header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(|e| EvalError::Schema(format!("{}: {e}", path.display())))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Tangent;

    fn outcome(id: u64, errs: Option<(f64, f64)>) -> QueryOutcome {
        let mut o = QueryOutcome::failed(id, Mode::Rpa, None, "x".into());
        if let Some((t, r)) = errs {
            o.est_pose = Some(PoseSE3::identity());
            o.trans_err = Some(t);
            o.rot_err = Some(r);
            o.failure = None;
        }
        o
    }

    #[test]
    fn recall_hand_fixture() {
        let outs = [outcome(0, Some((0.1, 1.0))), outcome(1, Some((0.4, 3.0))), outcome(2, Some((6.0, 20.0)))];
        let r = recall(&outs, &Thresholds::default()).unwrap();
        assert_eq!(r.localized, vec![1, 2, 2]);
        assert_eq!(r.summary(), "33.3 / 66.7 / 66.7");
        let all = recall(&[outcome(0, Some((0.0, 0.0)))], &Thresholds::default()).unwrap();
        assert_eq!(all.summary(), "100.0 / 100.0 / 100.0");
        let none = recall(&[outcome(0, None), outcome(1, None)], &Thresholds::default()).unwrap();
        assert_eq!(none.summary(), "0.0 / 0.0 / 0.0");
        assert!(matches!(recall(&[], &Thresholds::default()), Err(EvalError::EmptyInput)));
        let edge = recall(&[outcome(0, Some((0.25, 2.0)))], &Thresholds::default()).unwrap();
        assert_eq!(edge.localized, vec![1, 1, 1]);
    }

    #[test]
    fn threshold_parsing() {
        let t: Thresholds = "0.25,2;0.5,5;5,10".parse().unwrap();
        assert_eq!(t, Thresholds::default());
        assert!("0.5,5;0.25,2".parse::<Thresholds>().is_err());
        assert!("abc".parse::<Thresholds>().is_err());
    }

    #[test]
    fn huber_reprojection_fixtures() {
        let cam = PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let gt = PoseSE3::identity();
        let p = [Vector3::new(0.0, 0.0, 10.0)];
        assert_eq!(reprojection_loss(&gt, &gt, &p, &cam, 1.0).unwrap(), 0.0);
        // shifting the camera by 0.1 along x at depth 10 moves the pixel by 1
        let one = PoseSE3::exp(&Tangent::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!((reprojection_loss(&one, &gt, &p, &cam, 2.0).unwrap() - 0.5).abs() < 1e-9);
        let three = PoseSE3::exp(&Tangent::new(0.3, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!((reprojection_loss(&three, &gt, &p, &cam, 1.0).unwrap() - 2.5).abs() < 1e-9);
        let behind = [Vector3::new(0.0, 0.0, -1.0)];
        assert!(matches!(reprojection_loss(&gt, &gt, &behind, &cam, 1.0), Err(EvalError::NoValidPoints)));
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows =
            vec![ResultRow::from_outcome(&outcome(0, Some((0.1, 1.0)))), ResultRow::from_outcome(&outcome(1, None))];
        assert_eq!((rows[0].localized_25, rows[0].localized_500), (1, 1));
        let p = dir.path().join("r.csv");
        write_results(&rows, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with(RESULTS_HEADER));
        assert_eq!(read_results(&p).unwrap(), rows);
        write_results(&[], &p).unwrap();
        assert!(read_results(&p).unwrap().is_empty());
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_results(&p), Err(EvalError::Schema(_))));
    }

    #[test]
    fn modes_parse_and_print() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("xyz".parse::<Mode>().is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn errors() -> impl Strategy<Value = Vec<Option<(f64, f64)>>> {
        prop::collection::vec(prop::option::of((0.0f64..10.0, 0.0f64..20.0)), 1..40)
    }

    proptest! {
        #[test]
        fn recall_nested_and_bounded(errs in errors()) {
            let r = recall_from_errors(&errs, &Thresholds::default()).unwrap();
            prop_assert!(r.localized.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.percentages.iter().all(|p| (0.0..=100.0).contains(p)));
            prop_assert!(*r.localized.last().unwrap() <= errs.iter().flatten().count());
        }

        #[test]
        fn larger_errors_never_raise_recall(errs in errors(), scale in 1.0f64..3.0) {
            let worse: Vec<_> = errs.iter().map(|e| e.map(|(t, r)| (t * scale, r * scale))).collect();
            let a = recall_from_errors(&errs, &Thresholds::default()).unwrap();
            let b = recall_from_errors(&worse, &Thresholds::default()).unwrap();
            prop_assert!(a.localized.iter().zip(&b.localized).all(|(x, y)| y <= x));
        }
    }
}
