//! Synthetic scenes with exact ground truth.
//!
//! A handful of textured rectangles is viewed by keyframes on an orbit. The
//! "texture" is a smooth random-Fourier feature field defined in world
//! space, one field per pyramid level, so features of the same surface point
//! agree across views up to interpolation and the configured noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature::{save_pyramid, FeatureError, FeatureMap, FeaturePyramid, PyramidLevel, UncertaintyMap};
use crate::geometry::{PinholeCamera, PoseSE3, Tangent};
use crate::retrieval::{
    finalize_descriptor, fit_whitening, multiscale_raw, save_descriptor, save_whitening, GemParams, GlobalDescriptor,
    RetrievalError, WhiteningTransform,
};
use crate::scene_map::{save_map, Keyframe, MapError, Observation, SceneMap, ScenePoint};

pub const SCENE_DIAMETER: f64 = 10.0;
pub const ORACLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error("view misses every plane")]
    NoIntersection,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("oracle file: {0}")]
    Oracle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    Zero,
    BorderRamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraSpec {
    pub fn camera(&self) -> Result<PinholeCamera, SynthError> {
        PinholeCamera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| SynthError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Ground square plus `num_planes - 1` vertical planes through the centre.
    pub num_planes: usize,
    pub num_keyframes: usize,
    pub num_queries: usize,
    pub points_per_keyframe: usize,
    /// Pyramid strides, finest first, with one feature dimension and one
    /// texture scale (scene units) per stride.
    pub strides: Vec<u32>,
    pub feature_dims: Vec<usize>,
    pub smoothness: Vec<f64>,
    pub num_frequencies: usize,
    pub pixel_noise: f64,
    /// Feature noise relative to each channel's RMS.
    pub feature_noise: f64,
    pub uncertainty: UncertaintyMode,
    pub camera: CameraSpec,
    pub orbit_radius: f64,
    pub orbit_elevation_deg: f64,
    /// Elevation alternates by this much between neighbouring keyframes.
    pub elevation_spread_deg: f64,
    /// Query distance from the scene centre, before jitter.
    pub query_radius: f64,
    pub query_radius_jitter: f64,
    pub query_target_jitter: f64,
    pub retrieval_dim: usize,
    pub retrieval_smoothness: f64,
    pub retrieval_stride: u32,
    pub retrieval_scales: Vec<f64>,
    pub gem_p: f64,
    /// Extra views used to fit descriptor whitening; 0 disables whitening.
    pub whitening_views: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_planes: 4,
            num_keyframes: 30,
            num_queries: 40,
            points_per_keyframe: 200,
            strides: vec![1, 4, 16],
            feature_dims: vec![32, 64, 128],
            smoothness: vec![0.4, 0.8, 1.8],
            num_frequencies: 64,
            pixel_noise: 0.5,
            feature_noise: 0.01,
            uncertainty: UncertaintyMode::Zero,
            camera: CameraSpec { fx: 150.0, fy: 150.0, cx: 80.0, cy: 60.0, width: 161, height: 121 },
            orbit_radius: 12.0,
            orbit_elevation_deg: 30.0,
            elevation_spread_deg: 5.0,
            query_radius: 12.0,
            query_radius_jitter: 0.5,
            query_target_jitter: 0.3,
            retrieval_dim: 128,
            retrieval_smoothness: 2.5,
            retrieval_stride: 16,
            retrieval_scales: vec![1.0, std::f64::consts::FRAC_1_SQRT_2, 0.5],
            gem_p: 3.0,
            whitening_views: 400,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.num_planes == 0 || self.num_keyframes == 0 || self.points_per_keyframe == 0 {
            return bad("num_planes, num_keyframes and points_per_keyframe must be positive".into());
        }
        if self.strides.is_empty() || self.strides.windows(2).any(|w| w[0] >= w[1]) || self.strides[0] == 0 {
            return bad(format!("strides must be positive and strictly increasing, got {:?}", self.strides));
        }
        if self.feature_dims.len() != self.strides.len() || self.smoothness.len() != self.strides.len() {
            return bad("feature_dims and smoothness need one entry per stride".into());
        }
        if self.feature_dims.contains(&0) || self.smoothness.iter().any(|s| !(*s > 0.0)) {
            return bad("feature dims and smoothness must be positive".into());
        }
        if self.num_frequencies == 0 || self.retrieval_dim == 0 || self.retrieval_stride == 0 {
            return bad("num_frequencies, retrieval_dim and retrieval_stride must be positive".into());
        }
        if !(self.pixel_noise >= 0.0 && self.feature_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.orbit_radius > SCENE_DIAMETER / 2.0) {
            return bad("orbit_radius must keep cameras outside the scene".into());
        }
        if !(self.query_radius_jitter >= 0.0 && self.query_radius - self.query_radius_jitter > SCENE_DIAMETER / 2.0) {
            return bad("query_radius minus its jitter must keep queries outside the scene".into());
        }
        if !(self.retrieval_smoothness > 0.0) || !(self.gem_p >= 1.0) {
            return bad("retrieval_smoothness must be positive and gem_p at least 1".into());
        }
        if self.retrieval_scales.is_empty() || self.retrieval_scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return bad("retrieval_scales must lie in (0, 1]".into());
        }
        if self.whitening_views == 1 {
            return bad("whitening needs at least 2 views".into());
        }
        self.camera.camera()?;
        Ok(())
    }

    /// Observation tolerance the generated map satisfies.
    pub fn observation_tolerance(&self) -> f64 {
        3.0 * self.pixel_noise + 0.5
    }
}

/// Deterministic 64-bit seed from a list of parts.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |h, p| {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Smooth random-Fourier feature field
/// `f(X) = A cos(Omega X / sigma + phi) / sqrt(M) + b`, with `b` the
/// per-channel offset that makes every value non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    dim: usize,
    sigma: f64,
    freqs: Vec<Vector3<f64>>,
    phases: Vec<f64>,
    /// `dim x M`, row-major.
    amp: Vec<f64>,
    offset: Vec<f64>,
}

impl FeatureField {
    pub fn new(dim: usize, num_frequencies: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = num_frequencies;
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let freqs: Vec<Vector3<f64>> = (0..m).map(|_| Vector3::new(normal(), normal(), normal())).collect();
        let amp_scale = (2.0 / dim as f64).sqrt();
        let amp: Vec<f64> = (0..dim * m).map(|_| normal() * amp_scale).collect();
        let phases = (0..m).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let norm = 1.0 / (m as f64).sqrt();
        let offset = amp.chunks_exact(m).map(|row| row.iter().map(|a| a.abs()).sum::<f64>() * norm).collect();
        Self { dim, sigma, freqs, phases, amp, offset }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_frequencies(&self) -> usize {
        self.freqs.len()
    }

    /// Constant vector returned where no surface is hit.
    pub fn background(&self) -> &[f64] {
        &self.offset
    }

    /// Root mean square of each channel's oscillating part over random phases.
    pub fn channel_rms(&self) -> Vec<f64> {
        let m = self.freqs.len() as f64;
        self.amp
            .chunks_exact(self.freqs.len())
            .map(|row| (row.iter().map(|a| a * a).sum::<f64>() / (2.0 * m)).sqrt())
            .collect()
    }

    /// Upper bound on the Lipschitz constant of the field.
    pub fn lipschitz_bound(&self) -> f64 {
        let a = self.amp.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = self.freqs.iter().map(|f| f.norm_squared()).sum::<f64>().sqrt();
        a * w / (self.sigma * (self.freqs.len() as f64).sqrt())
    }

    pub fn eval_into(&self, x: &Vector3<f64>, cos_buf: &mut Vec<f64>, out: &mut [f64]) {
        let m = self.freqs.len();
        let norm = 1.0 / (m as f64).sqrt();
        cos_buf.clear();
        cos_buf.extend(self.freqs.iter().zip(&self.phases).map(|(w, p)| (w.dot(x) / self.sigma + p).cos() * norm));
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.amp[c * m..(c + 1) * m];
            *o = self.offset[c] + row.iter().zip(cos_buf.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Feature of the world point `x`.
pub fn world_feature(field: &FeatureField, x: &Vector3<f64>) -> Vec<f64> {
    let mut out = vec![0.0; field.dim];
    field.eval_into(x, &mut Vec::with_capacity(field.num_frequencies()), &mut out);
    out
}

/// Two-sided rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Plane {
    pub fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v)
    }

    /// Ray parameter and distance to the nearest border of the hit.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.center - origin)) / denom;
        if !(t > 1e-9) {
            return None;
        }
        let rel = origin + dir * t - self.center;
        let (a, b) = (rel.dot(&self.axis_u), rel.dot(&self.axis_v));
        if a.abs() > self.half_u || b.abs() > self.half_v {
            return None;
        }
        Some((t, (self.half_u - a.abs()).min(self.half_v - b.abs())))
    }

    fn corners(&self) -> [Vector3<f64>; 4] {
        let (u, v) = (self.axis_u * self.half_u, self.axis_v * self.half_v);
        [self.center + u + v, self.center + u - v, self.center - u + v, self.center - u - v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub border_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub planes: Vec<Plane>,
    pub center: Vector3<f64>,
}

impl Scene {
    /// Ground square and vertical planes through the centre at evenly spaced
    /// headings, scaled to the standard diameter.
    pub fn new(num_planes: usize) -> Scene {
        let h = 3.5;
        let mut planes =
            vec![Plane { center: Vector3::zeros(), axis_u: Vector3::x(), axis_v: Vector3::y(), half_u: h, half_v: h }];
        let verticals = num_planes.saturating_sub(1);
        for i in 0..verticals {
            let a = std::f64::consts::PI * i as f64 / verticals as f64;
            planes.push(Plane {
                center: Vector3::new(0.0, 0.0, h / 2.0),
                axis_u: Vector3::new(a.cos(), a.sin(), 0.0),
                axis_v: Vector3::z(),
                half_u: h,
                half_v: h / 2.0,
            });
        }
        let corners: Vec<Vector3<f64>> = planes.iter().flat_map(|p| p.corners()).collect();
        let mut diameter: f64 = 0.0;
        for a in &corners {
            for b in &corners {
                diameter = diameter.max((a - b).norm());
            }
        }
        let s = SCENE_DIAMETER / diameter;
        for p in planes.iter_mut() {
            p.center *= s;
            p.half_u *= s;
            p.half_v *= s;
        }
        let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
        for p in &planes {
            for c in p.corners() {
                lo = lo.inf(&c);
                hi = hi.sup(&c);
            }
        }
        Scene { planes, center: (lo + hi) / 2.0 }
    }

    /// Largest distance between two plane corners.
    pub fn diameter(&self) -> f64 {
        let corners: Vec<Vector3<f64>> = self.planes.iter().flat_map(|p| p.corners()).collect();
        let mut d: f64 = 0.0;
        for a in &corners {
            for b in &corners {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    /// Nearest plane hit along a ray.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        self.planes
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(t, border_distance)| Hit { t, point: origin + dir * t, border_distance })
    }

    /// True when nothing lies between `eye` and `x`.
    pub fn unoccluded(&self, eye: &Vector3<f64>, x: &Vector3<f64>) -> bool {
        let d = x - eye;
        match self.cast(eye, &d) {
            Some(hit) => hit.t >= 1.0 - 1e-9,
            None => true,
        }
    }
}

/// World-space direction of the ray through a pixel.
fn pixel_ray(camera: &PinholeCamera, pose: &PoseSE3, pixel: &Vector2<f64>) -> Vector3<f64> {
    pose.rotation().inverse() * camera.unproject(pixel)
}

/// Scene, feature fields and camera of one synthetic world.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub scene: Scene,
    pub camera: PinholeCamera,
    pub fields: Vec<FeatureField>,
    pub retrieval_field: FeatureField,
}

/// Image families, mixed into noise seeds.
const TAG_KEYFRAME: u64 = 1;
const TAG_QUERY: u64 = 2;
const TAG_TRAINING: u64 = 3;
const TAG_EXTRA: u64 = 4;

impl SynthWorld {
    pub fn new(config: &SynthConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let fields = config
            .feature_dims
            .iter()
            .zip(&config.smoothness)
            .enumerate()
            .map(|(i, (d, s))| {
                FeatureField::new(*d, config.num_frequencies, *s, derive_seed(&[config.seed, 100, i as u64]))
            })
            .collect();
        let retrieval_field = FeatureField::new(
            config.retrieval_dim,
            config.num_frequencies,
            config.retrieval_smoothness,
            derive_seed(&[config.seed, 200]),
        );
        Ok(Self {
            config: config.clone(),
            scene: Scene::new(config.num_planes),
            camera: config.camera.camera()?,
            fields,
            retrieval_field,
        })
    }

    /// Camera on the viewing sphere around the scene centre.
    pub fn orbit_pose(&self, azimuth: f64, elevation_deg: f64, radius: f64, target_offset: &Vector3<f64>) -> PoseSE3 {
        let e = elevation_deg.to_radians();
        let c = self.scene.center;
        let eye = c + radius * Vector3::new(e.cos() * azimuth.cos(), e.cos() * azimuth.sin(), e.sin());
        PoseSE3::look_at(&eye, &(c + target_offset), &Vector3::z())
    }

    pub fn keyframe_azimuth(&self, k: usize) -> f64 {
        std::f64::consts::TAU * k as f64 / self.config.num_keyframes as f64
    }

    pub fn keyframe_elevation(&self, k: usize) -> f64 {
        self.config.orbit_elevation_deg + self.config.elevation_spread_deg * ((k % 3) as f64 - 1.0)
    }

    pub fn keyframe_pose(&self, k: usize) -> PoseSE3 {
        self.orbit_pose(
            self.keyframe_azimuth(k),
            self.keyframe_elevation(k),
            self.config.orbit_radius,
            &Vector3::zeros(),
        )
    }

    fn level_index(&self, stride: u32) -> Result<usize, SynthError> {
        self.config
            .strides
            .iter()
            .position(|s| *s == stride)
            .ok_or_else(|| SynthError::Config(format!("stride {stride} not configured")))
    }

    /// Dense feature map of `field` seen from `pose`, one texel per `stride` pixels.
    pub fn render_field(
        &self,
        field: &FeatureField,
        camera: &PinholeCamera,
        pose: &PoseSE3,
        stride: u32,
        noise_seed: u64,
    ) -> Result<(FeatureMap, UncertaintyMap, usize), SynthError> {
        let w = (camera.width as usize - 1) / stride as usize + 1;
        let h = (camera.height as usize - 1) / stride as usize + 1;
        let d = field.dim();
        let eye = pose.center();
        let rms = field.channel_rms();
        let sigma_f = self.config.feature_noise;
        let ramp = 0.05 * SCENE_DIAMETER;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut data = vec![0.0f32; w * h * d];
        let mut unc = vec![0.0f32; w * h];
        let mut cos_buf = Vec::with_capacity(field.num_frequencies());
        let mut f = vec![0.0; d];
        let mut hits = 0;
        for y in 0..h {
            for x in 0..w {
                let px = Vector2::new((x as u32 * stride) as f64, (y as u32 * stride) as f64);
                let i = y * w + x;
                match self.scene.cast(&eye, &pixel_ray(camera, pose, &px)) {
                    Some(hit) => {
                        hits += 1;
                        field.eval_into(&hit.point, &mut cos_buf, &mut f);
                        if sigma_f > 0.0 {
                            for (v, r) in f.iter_mut().zip(&rms) {
                                let n: f64 = StandardNormal.sample(&mut rng);
                                *v += sigma_f * r * n;
                            }
                        }
                        unc[i] = (1.0 - hit.border_distance / ramp).max(0.0) as f32;
                    }
                    None => {
                        f.copy_from_slice(field.background());
                        unc[i] = 1.0;
                    }
                }
                for (dst, v) in data[i * d..(i + 1) * d].iter_mut().zip(&f) {
                    *dst = *v as f32;
                }
            }
        }
        if hits == 0 {
            return Err(SynthError::NoIntersection);
        }
        Ok((FeatureMap::new(w, h, d, stride, data)?, UncertaintyMap::new(w, h, stride, unc)?, hits))
    }

    /// Feature pyramid at the requested strides. `noise_key` identifies the
    /// image so its noise is reproducible.
    pub fn render_pyramid(
        &self,
        camera: &PinholeCamera,
        pose: &PoseSE3,
        strides: &[u32],
        noise_key: &[u64],
    ) -> Result<FeaturePyramid, SynthError> {
        let mut levels = Vec::with_capacity(strides.len());
        for &s in strides {
            let li = self.level_index(s)?;
            let mut key = vec![self.config.seed, 300, s as u64];
            key.extend_from_slice(noise_key);
            let (features, unc, _) = self.render_field(&self.fields[li], camera, pose, s, derive_seed(&key))?;
            let uncertainty = match self.config.uncertainty {
                UncertaintyMode::Zero => None,
                UncertaintyMode::BorderRamp => Some(unc),
            };
            levels.push(PyramidLevel { features, uncertainty });
        }
        Ok(FeaturePyramid::new(levels)?)
    }

    /// Multiscale GeM vector of the retrieval field, before whitening.
    pub fn raw_descriptor(&self, pose: &PoseSE3, noise_key: &[u64]) -> Result<Vec<f64>, SynthError> {
        let mut maps = Vec::with_capacity(self.config.retrieval_scales.len());
        for (i, s) in self.config.retrieval_scales.iter().enumerate() {
            let cam = self.camera.scaled(*s);
            let mut key = vec![self.config.seed, 400, i as u64];
            key.extend_from_slice(noise_key);
            let (m, _, _) =
                self.render_field(&self.retrieval_field, &cam, pose, self.config.retrieval_stride, derive_seed(&key))?;
            maps.push(m);
        }
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        Ok(multiscale_raw(&refs, &GemParams::shared(self.config.gem_p)?)?)
    }

    /// Up to `n` surface points seen through random pixels at least `margin`
    /// pixels inside the image, with their exact pixels.
    pub fn sample_points(
        &self,
        camera: &PinholeCamera,
        pose: &PoseSE3,
        n: usize,
        margin: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<(Vector3<f64>, Vector2<f64>)> {
        let eye = pose.center();
        let (w, h) = (camera.width as f64 - 1.0, camera.height as f64 - 1.0);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n && attempts < 50 * n {
            attempts += 1;
            let px = Vector2::new(rng.random_range(margin..w - margin), rng.random_range(margin..h - margin));
            if let Some(hit) = self.scene.cast(&eye, &pixel_ray(camera, pose, &px)) {
                let exact = camera.project(&pose.transform_point(&hit.point)).unwrap_or(px);
                out.push((hit.point, exact));
            }
        }
        out
    }

    /// Pixel of `x` when it is in front of the camera, inside the image and
    /// not hidden by another plane.
    pub fn visible_pixel(&self, camera: &PinholeCamera, pose: &PoseSE3, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        let px = camera.project(&pose.transform_point(x)).ok()?;
        let inside =
            px.x >= 0.0 && px.y >= 0.0 && px.x <= (camera.width - 1) as f64 && px.y <= (camera.height - 1) as f64;
        (inside && self.scene.unoccluded(&pose.center(), x)).then_some(px)
    }
}

/// Random `exp(delta) * pose` with tangent components of standard deviation
/// `sigma_t / sqrt(3)` and `sigma_r / sqrt(3)` so the RMS magnitudes are
/// `sigma_t` and `sigma_r` degrees.
pub fn perturb_pose(pose: &PoseSE3, sigma_t: f64, sigma_r_deg: f64, rng: &mut impl Rng) -> PoseSE3 {
    let st = sigma_t / 3f64.sqrt();
    let sr = sigma_r_deg.to_radians() / 3f64.sqrt();
    let mut d = Tangent::zeros();
    for i in 0..6 {
        let n: f64 = StandardNormal.sample(rng);
        d[i] = n * if i < 3 { st } else { sr };
    }
    PoseSE3::exp(&d).compose(pose)
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(&mut *rng));
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Moves the camera centre by exactly `distance` and rotates the camera by
/// exactly `angle_deg`, both in random directions.
pub fn perturb_pose_exact(pose: &PoseSE3, distance: f64, angle_deg: f64, rng: &mut impl Rng) -> PoseSE3 {
    let t = random_unit(rng) * distance;
    let axis = nalgebra::Unit::new_normalize(random_unit(rng));
    let rot = UnitQuaternion::from_axis_angle(&axis, angle_deg.to_radians()) * pose.rotation();
    PoseSE3::from_center(rot, &(pose.center() + t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point_id: u64,
    pub query_pixel: Vector2<f64>,
    pub keyframe_pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthQuery {
    pub id: u64,
    pub gt_pose: PoseSE3,
    pub source_keyframe: u64,
    pub correspondences: Vec<Correspondence>,
}

/// Ground truth for a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub scene_diameter: f64,
    /// Largest two-view feature discrepancy over the correspondences, per stride.
    pub epsilon_render: BTreeMap<u32, f64>,
    pub queries: Vec<SynthQuery>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleFile {
    version: u32,
    scene_diameter: f64,
    epsilon_render: BTreeMap<String, f64>,
    queries: Vec<OracleQueryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleQueryFile {
    id: u64,
    gt_pose: String,
    source_keyframe: u64,
    correspondences: Vec<(u64, f64, f64, f64, f64)>,
}

impl Oracle {
    pub fn query(&self, id: u64) -> Option<&SynthQuery> {
        self.queries.iter().find(|q| q.id == id)
    }

    pub fn gt_poses(&self) -> BTreeMap<u64, PoseSE3> {
        self.queries.iter().map(|q| (q.id, q.gt_pose)).collect()
    }

    pub fn to_json(&self) -> String {
        let file = OracleFile {
            version: ORACLE_VERSION,
            scene_diameter: self.scene_diameter,
            epsilon_render: self.epsilon_render.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            queries: self
                .queries
                .iter()
                .map(|q| OracleQueryFile {
                    id: q.id,
                    gt_pose: q.gt_pose.to_string(),
                    source_keyframe: q.source_keyframe,
                    correspondences: q
                        .correspondences
                        .iter()
                        .map(|c| (c.point_id, c.query_pixel.x, c.query_pixel.y, c.keyframe_pixel.x, c.keyframe_pixel.y))
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("oracle serializes")
    }

    pub fn from_json(text: &str) -> Result<Oracle, SynthError> {
        let file: OracleFile = serde_json::from_str(text).map_err(|e| SynthError::Oracle(e.to_string()))?;
        if file.version != ORACLE_VERSION {
            return Err(SynthError::Oracle(format!("unsupported version {}", file.version)));
        }
        let epsilon_render = file
            .epsilon_render
            .into_iter()
            .map(|(k, v)| k.parse::<u32>().map(|k| (k, v)).map_err(|e| SynthError::Oracle(e.to_string())))
            .collect::<Result<_, _>>()?;
        let queries = file
            .queries
            .into_iter()
            .map(|q| {
                Ok(SynthQuery {
                    id: q.id,
                    gt_pose: q.gt_pose.parse().map_err(|e| SynthError::Oracle(format!("query {}: {e}", q.id)))?,
                    source_keyframe: q.source_keyframe,
                    correspondences: q
                        .correspondences
                        .into_iter()
                        .map(|(point_id, qx, qy, kx, ky)| Correspondence {
                            point_id,
                            query_pixel: Vector2::new(qx, qy),
                            keyframe_pixel: Vector2::new(kx, ky),
                        })
                        .collect(),
                })
            })
            .collect::<Result<_, SynthError>>()?;
        Ok(Oracle { scene_diameter: file.scene_diameter, epsilon_render, queries })
    }
}

pub fn load_oracle(path: impl AsRef<Path>) -> Result<Oracle, SynthError> {
    Oracle::from_json(&fs::read_to_string(path)?)
}

/// A complete generated benchmark held in memory.
#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub world: SynthWorld,
    pub map: SceneMap,
    pub oracle: Oracle,
    pub keyframe_pyramids: BTreeMap<u64, FeaturePyramid>,
    pub query_pyramids: BTreeMap<u64, FeaturePyramid>,
    pub keyframe_descriptors: BTreeMap<u64, GlobalDescriptor>,
    pub query_descriptors: BTreeMap<u64, GlobalDescriptor>,
    pub whitening: Option<WhiteningTransform>,
}

/// Query `j` sits between keyframes `j mod N` and the next one on the orbit.
fn query_pose(world: &SynthWorld, j: usize, rng: &mut ChaCha8Rng) -> (PoseSE3, u64) {
    let cfg = &world.config;
    let n = cfg.num_keyframes;
    let a = j % n;
    let b = (a + 1) % n;
    let t = rng.random_range(0.3..0.7);
    let step = std::f64::consts::TAU / n as f64;
    let azimuth = world.keyframe_azimuth(a) + t * step;
    let elevation =
        (1.0 - t) * world.keyframe_elevation(a) + t * world.keyframe_elevation(b) + rng.random_range(-1.0..1.0);
    let radius = cfg.query_radius + rng.random_range(-cfg.query_radius_jitter..=cfg.query_radius_jitter);
    let j = cfg.query_target_jitter;
    let offset = Vector3::from_fn(|_, _| rng.random_range(-j..=j));
    let pose = world.orbit_pose(azimuth, elevation, radius, &offset);
    let source = if t < 0.5 { a } else { b };
    (pose, source as u64)
}

/// Gaussian pixel noise truncated at three standard deviations.
fn pixel_noise(sigma: f64, rng: &mut ChaCha8Rng) -> Vector2<f64> {
    if sigma == 0.0 {
        return Vector2::zeros();
    }
    loop {
        let n = Vector2::new(StandardNormal.sample(&mut *rng), StandardNormal.sample(&mut *rng)) * sigma;
        if n.norm() <= 3.0 * sigma {
            return n;
        }
    }
}

/// Generates the map, ground truth, feature pyramids and descriptors.
pub fn generate_scene(config: &SynthConfig) -> Result<SynthBenchmark, SynthError> {
    let world = SynthWorld::new(config)?;
    let cam = world.camera;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 1]));

    let mut keyframes = Vec::with_capacity(config.num_keyframes);
    let mut points = Vec::new();
    for k in 0..config.num_keyframes {
        let pose = world.keyframe_pose(k);
        let margin = 1.0 + 3.0 * config.pixel_noise;
        let mut observations = Vec::with_capacity(config.points_per_keyframe);
        for (x, px) in world.sample_points(&cam, &pose, config.points_per_keyframe, margin, &mut rng) {
            let id = points.len() as u64;
            points.push(ScenePoint { id, position: x });
            observations.push(Observation { point_id: id, pixel: px + pixel_noise(config.pixel_noise, &mut rng) });
        }
        keyframes.push(Keyframe { id: k as u64, camera_id: 0, pose, observations });
    }

    let mut queries = Vec::with_capacity(config.num_queries);
    for j in 0..config.num_queries {
        let (gt_pose, source) = query_pose(&world, j, &mut rng);
        let kf = &keyframes[source as usize];
        let correspondences = kf
            .observations
            .iter()
            .filter_map(|o| {
                let x = points[o.point_id as usize].position;
                let q = world.visible_pixel(&cam, &gt_pose, &x)?;
                let k = cam.project(&kf.pose.transform_point(&x)).ok()?;
                Some(Correspondence { point_id: o.point_id, query_pixel: q, keyframe_pixel: k })
            })
            .collect();
        queries.push(SynthQuery { id: j as u64, gt_pose, source_keyframe: source, correspondences });
    }

    let training_poses: Vec<PoseSE3> = (0..config.whitening_views)
        .map(|_| {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let el = config.orbit_elevation_deg + rng.random_range(-2.0..2.0) * config.elevation_spread_deg.max(1.0);
            let r = config.orbit_radius + rng.random_range(-1.0..1.0);
            let j = config.query_target_jitter;
            world.orbit_pose(az, el, r, &Vector3::from_fn(|_, _| rng.random_range(-j..=j)))
        })
        .collect();

    let strides = config.strides.clone();
    let render = |pose: &PoseSE3, tag: u64, id: u64| -> Result<(FeaturePyramid, Vec<f64>), SynthError> {
        Ok((world.render_pyramid(&cam, pose, &strides, &[tag, id])?, world.raw_descriptor(pose, &[tag, id])?))
    };
    let kf_out: Vec<(FeaturePyramid, Vec<f64>)> =
        keyframes.par_iter().map(|k| render(&k.pose, TAG_KEYFRAME, k.id)).collect::<Result<_, _>>()?;
    let q_out: Vec<(FeaturePyramid, Vec<f64>)> =
        queries.par_iter().map(|q| render(&q.gt_pose, TAG_QUERY, q.id)).collect::<Result<_, _>>()?;
    let training: Vec<Vec<f64>> = training_poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| world.raw_descriptor(p, &[TAG_TRAINING, i as u64]))
        .collect::<Result<_, _>>()?;
    let whitening = if config.whitening_views > 0 { Some(fit_whitening(&training)?) } else { None };

    let mut keyframe_pyramids = BTreeMap::new();
    let mut keyframe_descriptors = BTreeMap::new();
    for (k, (pyr, raw)) in keyframes.iter().zip(kf_out) {
        keyframe_descriptors.insert(k.id, finalize_descriptor(&raw, whitening.as_ref())?);
        keyframe_pyramids.insert(k.id, pyr);
    }
    let mut query_pyramids = BTreeMap::new();
    let mut query_descriptors = BTreeMap::new();
    for (q, (pyr, raw)) in queries.iter().zip(q_out) {
        query_descriptors.insert(q.id, finalize_descriptor(&raw, whitening.as_ref())?);
        query_pyramids.insert(q.id, pyr);
    }

    let mut epsilon_render = BTreeMap::new();
    for &s in &config.strides {
        let mut eps: f64 = 0.0;
        for q in &queries {
            let fq = &query_pyramids[&q.id].level(s).expect("rendered stride").features;
            let fk = &keyframe_pyramids[&q.source_keyframe].level(s).expect("rendered stride").features;
            for c in &q.correspondences {
                let a = fq.bilinear_sample(&c.query_pixel)?;
                let b = fk.bilinear_sample(&c.keyframe_pixel)?;
                let d = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                eps = eps.max(d);
            }
        }
        epsilon_render.insert(s, eps);
    }

    let mut map = SceneMap::new(BTreeMap::from([(0, cam)]), keyframes, points, config.observation_tolerance())?;
    map.global_descriptors = Some(keyframe_descriptors.clone());
    Ok(SynthBenchmark {
        oracle: Oracle { scene_diameter: world.scene.diameter(), epsilon_render, queries },
        world,
        map,
        keyframe_pyramids,
        query_pyramids,
        keyframe_descriptors,
        query_descriptors,
        whitening,
    })
}

/// Renders an extra view of a generated world, e.g. for tests.
pub fn render_extra(
    world: &SynthWorld,
    pose: &PoseSE3,
    strides: &[u32],
    id: u64,
) -> Result<FeaturePyramid, SynthError> {
    world.render_pyramid(&world.camera, pose, strides, &[TAG_EXTRA, id])
}

pub fn keyframe_pyramid_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join("pyramids").join(format!("kf_{id}.fpyr"))
}

pub fn query_pyramid_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join("pyramids").join(format!("q_{id}.fpyr"))
}

pub fn keyframe_descriptor_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join("descriptors").join(format!("kf_{id}.gdsc"))
}

pub fn query_descriptor_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join("descriptors").join(format!("q_{id}.gdsc"))
}

/// Writes `map.json`, `oracle.json`, `synth_config.toml`, `whitening.gwht`
/// and the `pyramids/` and `descriptors/` directories.
pub fn write_benchmark(bench: &SynthBenchmark, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("pyramids"))?;
    fs::create_dir_all(dir.join("descriptors"))?;
    save_map(&bench.map, dir.join("map.json"))?;
    fs::write(dir.join("oracle.json"), bench.oracle.to_json())?;
    let cfg = toml::to_string(&bench.world.config).map_err(|e| SynthError::Config(e.to_string()))?;
    fs::write(dir.join("synth_config.toml"), cfg)?;
    if let Some(w) = &bench.whitening {
        save_whitening(w, dir.join("whitening.gwht"))?;
    }
    for (id, p) in &bench.keyframe_pyramids {
        save_pyramid(p, keyframe_pyramid_path(dir, *id))?;
    }
    for (id, p) in &bench.query_pyramids {
        save_pyramid(p, query_pyramid_path(dir, *id))?;
    }
    for (id, d) in &bench.keyframe_descriptors {
        save_descriptor(d, keyframe_descriptor_path(dir, *id))?;
    }
    for (id, d) in &bench.query_descriptors {
        save_descriptor(d, query_descriptor_path(dir, *id))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;

    fn small_config() -> SynthConfig {
        SynthConfig {
            num_keyframes: 6,
            num_queries: 4,
            points_per_keyframe: 60,
            whitening_views: 0,
            ..Default::default()
        }
    }

    #[test]
    fn field_is_deterministic_nonnegative_and_lipschitz() {
        let f = FeatureField::new(16, 32, 0.5, 3);
        let g = FeatureField::new(16, 32, 0.5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = f.lipschitz_bound();
        for _ in 0..500 {
            let x = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let h = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let a = world_feature(&f, &x);
            assert_eq!(a, world_feature(&g, &x));
            assert!(a.iter().all(|v| *v >= -1e-12));
            let b = world_feature(&f, &(x + h));
            let d = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!(d <= l * h.norm() + 1e-12);
        }
    }

    #[test]
    fn seeds_give_decorrelated_fields() {
        let f = FeatureField::new(64, 64, 1.0, 1);
        let g = FeatureField::new(64, 64, 1.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = 0.0;
        let n = 500;
        for _ in 0..n {
            let x = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let a: Vec<f64> = world_feature(&f, &x).iter().zip(f.background()).map(|(v, b)| v - b).collect();
            let b: Vec<f64> = world_feature(&g, &x).iter().zip(g.background()).map(|(v, b)| v - b).collect();
            let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc += (dot / (na * nb)).abs();
        }
        assert!(acc / (n as f64) < 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let inside = SynthConfig { query_radius: 5.2, query_radius_jitter: 0.5, ..Default::default() };
        assert!(inside.validate().is_err());
        let strides = SynthConfig { strides: vec![16, 4], ..Default::default() };
        assert!(strides.validate().is_err());
        let whitening = SynthConfig { whitening_views: 1, ..Default::default() };
        assert!(whitening.validate().is_err());
    }

    #[test]
    fn scene_has_standard_diameter() {
        for n in 1..6 {
            assert!((Scene::new(n).diameter() - SCENE_DIAMETER).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbation_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pose = PoseSE3::look_at(&Vector3::new(10.0, 2.0, 3.0), &Vector3::zeros(), &Vector3::z());
        assert_eq!(perturb_pose(&pose, 0.0, 0.0, &mut rng), pose);
        let (mut st, mut sr) = (0.0, 0.0);
        let n = 1000;
        for _ in 0..n {
            let (t, r) = pose_error(&perturb_pose(&pose, 0.3, 4.0, &mut rng), &pose);
            st += t * t;
            sr += r * r;
        }
        let (st, sr) = ((st / n as f64).sqrt(), (sr / n as f64).sqrt());
        assert!((st / 0.3 - 1.0).abs() < 0.2, "{st}");
        assert!((sr / 4.0 - 1.0).abs() < 0.2, "{sr}");
        let p = perturb_pose_exact(&pose, 0.2, 5.0, &mut rng);
        let (t, r) = pose_error(&p, &pose);
        assert!((t - 0.2).abs() < 1e-9 && (r - 5.0).abs() < 1e-9);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(perturb_pose(&pose, 0.1, 1.0, &mut a), perturb_pose(&pose, 0.1, 1.0, &mut b));
    }

    #[test]
    fn generated_scene_invariants() {
        let cfg = small_config();
        let bench = generate_scene(&cfg).unwrap();
        for kf in &bench.map.keyframes {
            assert!(kf.observations.len() as f64 >= 0.9 * cfg.points_per_keyframe as f64);
        }
        let text = bench.map.to_json();
        SceneMap::from_json(&text, cfg.observation_tolerance()).unwrap();
        assert_eq!(text, generate_scene(&cfg).unwrap().map.to_json());
        let cam = bench.world.camera;
        for q in &bench.oracle.queries {
            let kf = bench.map.keyframe(q.source_keyframe).unwrap();
            for c in &q.correspondences {
                let x = bench.map.point(c.point_id).unwrap().position;
                let pq = cam.project(&q.gt_pose.transform_point(&x)).unwrap();
                let pk = cam.project(&kf.pose.transform_point(&x)).unwrap();
                assert!((pq - c.query_pixel).norm() < 1e-6 && (pk - c.keyframe_pixel).norm() < 1e-6);
            }
        }
        let oracle = Oracle::from_json(&bench.oracle.to_json()).unwrap();
        assert_eq!(oracle, bench.oracle);
    }

    #[test]
    fn background_and_zero_uncertainty() {
        let cfg = small_config();
        let world = SynthWorld::new(&cfg).unwrap();
        // looking straight up from above the scene sees nothing
        let pose = PoseSE3::look_at(&Vector3::new(0.0, 0.0, 20.0), &Vector3::new(0.0, 0.0, 30.0), &Vector3::x());
        assert!(matches!(render_extra(&world, &pose, &[16], 0), Err(SynthError::NoIntersection)));
        let pose = world.keyframe_pose(0);
        let pyr = render_extra(&world, &pose, &[4, 16], 1).unwrap();
        assert!(pyr.levels().iter().all(|l| l.uncertainty.is_none()));
        let f = &pyr.level(16).unwrap().features;
        let bg: Vec<f32> = world.fields[2].background().iter().map(|v| *v as f32).collect();
        // the top-left texel looks above the scene
        assert_eq!(f.texel(0, 0), &bg[..]);
    }

    #[test]
    fn noise_free_views_agree_at_correspondences() {
        let cfg = SynthConfig { feature_noise: 0.0, pixel_noise: 0.0, ..small_config() };
        let bench = generate_scene(&cfg).unwrap();
        let mut d = Vec::new();
        for q in &bench.oracle.queries {
            let fq = &bench.query_pyramids[&q.id].level(1).unwrap().features;
            let fk = &bench.keyframe_pyramids[&q.source_keyframe].level(1).unwrap().features;
            for c in &q.correspondences {
                let a = fq.bilinear_sample(&c.query_pixel).unwrap();
                let b = fk.bilinear_sample(&c.keyframe_pixel).unwrap();
                d.push(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        assert!(d.len() > 50);
        assert!(d[d.len() / 2] < 0.02, "median {}", d[d.len() / 2]);
        assert_eq!(*d.last().unwrap(), bench.oracle.epsilon_render[&1]);
    }
}
