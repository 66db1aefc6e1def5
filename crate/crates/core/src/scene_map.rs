//! The reference map: cameras, 3D points and keyframes with observations.
//!
//! Maps are stored as versioned JSON. Every observation is checked at load
//! time against the reprojection of its point through the keyframe pose.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PinholeCamera, PoseSE3};
use crate::retrieval::GlobalDescriptor;

pub const MAP_VERSION: u32 = 1;
pub const DEFAULT_OBS_TOL: f64 = 2.0;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("map integrity violated: {0}")]
    Integrity(String),
    #[error("unknown id {0}")]
    UnknownId(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub id: u64,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub point_id: u64,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    pub camera_id: u64,
    pub pose: PoseSE3,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMap {
    pub cameras: BTreeMap<u64, PinholeCamera>,
    pub keyframes: Vec<Keyframe>,
    pub points: Vec<ScenePoint>,
    pub global_descriptors: Option<BTreeMap<u64, GlobalDescriptor>>,
    point_index: HashMap<u64, usize>,
    keyframe_index: HashMap<u64, usize>,
}

impl SceneMap {
    /// Builds and validates a map, checking observations against `obs_tol` pixels.
    pub fn new(
        cameras: BTreeMap<u64, PinholeCamera>,
        keyframes: Vec<Keyframe>,
        points: Vec<ScenePoint>,
        obs_tol: f64,
    ) -> Result<Self, MapError> {
        let mut point_index = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if point_index.insert(p.id, i).is_some() {
                return Err(MapError::Integrity(format!("duplicate point id {}", p.id)));
            }
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(MapError::Integrity(format!("point {} has non-finite position", p.id)));
            }
        }
        let mut keyframe_index = HashMap::with_capacity(keyframes.len());
        for (i, k) in keyframes.iter().enumerate() {
            if keyframe_index.insert(k.id, i).is_some() {
                return Err(MapError::Integrity(format!("duplicate keyframe id {}", k.id)));
            }
        }
        let map = Self { cameras, keyframes, points, global_descriptors: None, point_index, keyframe_index };
        map.validate(obs_tol)?;
        Ok(map)
    }

    fn validate(&self, obs_tol: f64) -> Result<(), MapError> {
        if self.keyframes.is_empty() {
            return Err(MapError::Integrity("map has no keyframes".into()));
        }
        for cam in self.cameras.values() {
            cam.validate().map_err(|e| MapError::Integrity(e.to_string()))?;
        }
        for kf in &self.keyframes {
            let cam = self.cameras.get(&kf.camera_id).ok_or_else(|| {
                MapError::Integrity(format!("keyframe {} references missing camera {}", kf.id, kf.camera_id))
            })?;
            let mut seen = HashSet::with_capacity(kf.observations.len());
            for obs in &kf.observations {
                if !seen.insert(obs.point_id) {
                    return Err(MapError::Integrity(format!(
                        "keyframe {} observes point {} twice",
                        kf.id, obs.point_id
                    )));
                }
                let point = self.point(obs.point_id).ok_or_else(|| {
                    MapError::Integrity(format!("keyframe {} observes dangling point id {}", kf.id, obs.point_id))
                })?;
                if !cam.contains(&obs.pixel, 0.0) {
                    return Err(MapError::Integrity(format!(
                        "keyframe {} observation of point {} at ({}, {}) is outside the image",
                        kf.id, obs.point_id, obs.pixel.x, obs.pixel.y
                    )));
                }
                let reproj = cam
                    .project(&kf.pose.transform_point(&point.position))
                    .map_err(|e| MapError::Integrity(format!("keyframe {} point {}: {e}", kf.id, obs.point_id)))?;
                let err = (reproj - obs.pixel).norm();
                if !(err <= obs_tol) {
                    return Err(MapError::Integrity(format!(
                        "keyframe {} point {} reprojects {err:.3} px from its observation (tolerance {obs_tol})",
                        kf.id, obs.point_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn point(&self, id: u64) -> Option<&ScenePoint> {
        self.point_index.get(&id).map(|&i| &self.points[i])
    }

    pub fn keyframe(&self, id: u64) -> Option<&Keyframe> {
        self.keyframe_index.get(&id).map(|&i| &self.keyframes[i])
    }

    pub fn camera(&self, id: u64) -> Option<&PinholeCamera> {
        self.cameras.get(&id)
    }

    /// Observations of a keyframe joined with their points, ordered by point id.
    pub fn visible_points(&self, keyframe_id: u64) -> Result<Vec<(ScenePoint, Vector2<f64>)>, MapError> {
        let kf = self.keyframe(keyframe_id).ok_or(MapError::UnknownId(keyframe_id))?;
        let mut out: Vec<_> =
            kf.observations.iter().map(|o| (self.points[self.point_index[&o.point_id]], o.pixel)).collect();
        out.sort_by_key(|(p, _)| p.id);
        Ok(out)
    }

    /// All points in front of the camera that project inside the image
    /// grown by `margin_px`, ordered by point id.
    pub fn points_in_view(
        &self,
        pose: &PoseSE3,
        camera: &PinholeCamera,
        margin_px: f64,
    ) -> Vec<(ScenePoint, Vector2<f64>)> {
        let mut out: Vec<_> = self
            .points
            .iter()
            .filter_map(|p| {
                let px = camera.project(&pose.transform_point(&p.position)).ok()?;
                camera.contains(&px, margin_px).then_some((*p, px))
            })
            .collect();
        out.sort_by_key(|(p, _)| p.id);
        out
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            version: MAP_VERSION,
            cameras: self
                .cameras
                .iter()
                .map(|(&id, c)| CameraRecord {
                    id,
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    width: c.width,
                    height: c.height,
                })
                .collect(),
            points: self
                .points
                .iter()
                .map(|p| PointRecord { id: p.id, xyz: [p.position.x, p.position.y, p.position.z] })
                .collect(),
            keyframes: self
                .keyframes
                .iter()
                .map(|k| KeyframeRecord {
                    id: k.id,
                    camera_id: k.camera_id,
                    pose: k.pose.to_string(),
                    obs: k.observations.iter().map(|o| (o.point_id, o.pixel.x, o.pixel.y)).collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("map serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, obs_tol: f64) -> Result<Self, MapError> {
        let file: MapFile =
            serde_json::from_str(text).map_err(|e| MapError::Parse { line: e.line(), message: e.to_string() })?;
        if file.version != MAP_VERSION {
            return Err(MapError::Parse { line: 1, message: format!("unsupported map version {}", file.version) });
        }
        let mut cameras = BTreeMap::new();
        for c in file.cameras {
            let cam = PinholeCamera { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height };
            if cameras.insert(c.id, cam).is_some() {
                return Err(MapError::Integrity(format!("duplicate camera id {}", c.id)));
            }
        }
        let points = file.points.into_iter().map(|p| ScenePoint { id: p.id, position: Vector3::from(p.xyz) }).collect();
        let keyframes = file
            .keyframes
            .into_iter()
            .map(|k| {
                let pose: PoseSE3 = k.pose.parse().map_err(|e: GeometryError| MapError::Parse {
                    line: line_of(text, &k.pose),
                    message: format!("keyframe {}: {e}", k.id),
                })?;
                Ok(Keyframe {
                    id: k.id,
                    camera_id: k.camera_id,
                    pose,
                    observations: k
                        .obs
                        .into_iter()
                        .map(|(point_id, u, v)| Observation { point_id, pixel: Vector2::new(u, v) })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>, MapError>>()?;
        SceneMap::new(cameras, keyframes, points, obs_tol)
    }
}

fn line_of(text: &str, needle: &str) -> usize {
    text.find(needle).map(|i| text[..i].lines().count().max(1)).unwrap_or(0)
}

pub fn load_map(path: impl AsRef<Path>) -> Result<SceneMap, MapError> {
    load_map_with_tolerance(path, DEFAULT_OBS_TOL)
}

pub fn load_map_with_tolerance(path: impl AsRef<Path>, obs_tol: f64) -> Result<SceneMap, MapError> {
    SceneMap::from_json(&fs::read_to_string(path)?, obs_tol)
}

pub fn save_map(map: &SceneMap, path: impl AsRef<Path>) -> Result<(), MapError> {
    fs::write(path, map.to_json())?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    version: u32,
    cameras: Vec<CameraRecord>,
    points: Vec<PointRecord>,
    keyframes: Vec<KeyframeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: u64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointRecord {
    id: u64,
    xyz: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyframeRecord {
    id: u64,
    camera_id: u64,
    pose: String,
    obs: Vec<(u64, f64, f64)>,
}
