use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use objmap_core::model::{load_model, ModelLibrary};
use objmap_core::{CameraModel, Pose};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: u16,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Model name, e.g. `chair` or `table`, or the name of a model file entry.
    pub model: String,
    /// `[t_s, x_m, y_m, yaw_deg]`, strictly increasing in time.
    pub waypoints: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub keypoint_sigma_px: f64,
    pub depth_sigma_m: f64,
    pub keypoint_dropout: f64,
    pub outlier_prob: f64,
    pub outlier_px: f64,
    /// Per-camera timestamp jitter, uniform in ±this value.
    pub clock_jitter_ms: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { keypoint_sigma_px: 0.0, depth_sigma_m: 0.0, keypoint_dropout: 0.0, outlier_prob: 0.0, outlier_px: 40.0, clock_jitter_ms: 0.0 }
    }
}

/// Axis-aligned box that hides keypoints and depth points while active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default)]
    pub t_start: f64,
    #[serde(default = "forever")]
    pub t_end: f64,
}

fn forever() -> f64 {
    f64::INFINITY
}

fn one_hz() -> f64 {
    1.0
}

impl Occluder {
    pub fn active(&self, t: f64) -> bool {
        t >= self.t_start && t <= self.t_end
    }

    /// Whether the open segment `a → b` passes through the box (slab test).
    pub fn blocks(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let d = b - a;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if a[k] < self.min[k] || a[k] > self.max[k] {
                    return false;
                }
            } else {
                let (mut lo, mut hi) = ((self.min[k] - a[k]) / d[k], (self.max[k] - a[k]) / d[k]);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
                if t0 > t1 {
                    return false;
                }
            }
        }
        // the endpoint itself may touch the box surface
        t0 < 1.0 - 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "one_hz")]
    pub frame_rate_hz: f64,
    #[serde(default)]
    pub intrinsics: Intrinsics,
    pub cameras: Vec<CameraSpec>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
    /// Extra model files, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub model_files: Vec<PathBuf>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_s * self.frame_rate_hz + 1e-9).floor() as usize
    }

    pub fn frame_time(&self, k: usize) -> f64 {
        k as f64 / self.frame_rate_hz
    }

    pub fn frame_timestamp_us(&self, k: usize) -> u64 {
        (self.frame_time(k) * 1e6).round() as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return bad(format!("frame_rate_hz must be positive, got {}", self.frame_rate_hz));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if self.cameras.is_empty() {
            return bad("at least one camera is required".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.cameras {
            if !ids.insert(c.id) {
                return bad(format!("duplicate camera id {}", c.id));
            }
            if c.position == c.look_at {
                return bad(format!("camera {} looks at its own position", c.id));
            }
            let cam = self.camera_model(c);
            if !cam.is_valid() {
                return bad(format!("camera {} has invalid intrinsics", c.id));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.waypoints.is_empty() {
                return bad(format!("object {i} has no waypoints"));
            }
            if o.waypoints.iter().flatten().any(|v| !v.is_finite()) {
                return bad(format!("object {i} has a non-finite waypoint"));
            }
            if o.waypoints.windows(2).any(|w| w[1][0] <= w[0][0]) {
                return bad(format!("object {i} has overlapping or unordered waypoint times"));
            }
        }
        let n = &self.noise;
        let probs = [("keypoint_dropout", n.keypoint_dropout), ("outlier_prob", n.outlier_prob)];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let sigmas = [n.keypoint_sigma_px, n.depth_sigma_m, n.outlier_px, n.clock_jitter_ms];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise magnitudes must be finite and non-negative".into());
        }
        for (i, o) in self.occluders.iter().enumerate() {
            if (0..3).any(|k| o.min[k] >= o.max[k]) || o.t_end < o.t_start {
                return bad(format!("occluder {i} is empty"));
            }
        }
        self.models()?;
        Ok(())
    }

    pub fn camera_model(&self, c: &CameraSpec) -> CameraModel {
        let k = c.intrinsics.unwrap_or(self.intrinsics);
        let eye = Vector3::from(c.position);
        CameraModel::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
            .with_extrinsic(CameraModel::look_at(eye, Vector3::from(c.look_at)))
    }

    pub fn camera_models(&self) -> Vec<(u16, CameraModel)> {
        self.cameras.iter().map(|c| (c.id, self.camera_model(c))).collect()
    }

    /// Built-in models plus any model files, checked against the object list.
    pub fn models(&self) -> Result<ModelLibrary<f64>, ConfigError> {
        let mut lib = ModelLibrary::builtin();
        for f in &self.model_files {
            let path = match &self.base_dir {
                Some(b) if f.is_relative() => b.join(f),
                _ => f.clone(),
            };
            let m = load_model(&path).map_err(|e| ConfigError::Invalid(format!("model file {}: {e}", path.display())))?;
            lib.insert(m);
        }
        for o in &self.objects {
            if lib.by_name(&o.model).is_none() {
                return Err(ConfigError::Invalid(format!("unknown model `{}`", o.model)));
            }
        }
        Ok(lib)
    }

    /// Ground-truth pose of object `i` at time `t`: linear position and
    /// shortest-arc yaw between waypoints, clamped at both ends.
    pub fn object_pose(&self, i: usize, t: f64, ground_offset: f64) -> Pose {
        let wp = &self.objects[i].waypoints;
        let (x, y, yaw_deg) = if t <= wp[0][0] {
            (wp[0][1], wp[0][2], wp[0][3])
        } else if t >= wp[wp.len() - 1][0] {
            let w = wp[wp.len() - 1];
            (w[1], w[2], w[3])
        } else {
            let k = wp.windows(2).position(|w| t < w[1][0]).expect("t inside waypoint span");
            let (a, b) = (wp[k], wp[k + 1]);
            let s = (t - a[0]) / (b[0] - a[0]);
            let dyaw = (b[3] - a[3] + 180.0).rem_euclid(360.0) - 180.0;
            (a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2]), a[3] + s * dyaw)
        };
        Pose::from_yaw(Vector3::new(x, y, ground_offset), yaw_deg.to_radians())
    }

    /// Four corner cameras around a 5 chair + 1 table scene, 60 s at 1 Hz.
    pub fn default_scenario() -> Self {
        let cam = |id: u16, x: f64, y: f64| CameraSpec { id, position: [x, y, 2.6], look_at: [0.0, 0.0, 0.4], intrinsics: None };
        let obj = |model: &str, wps: &[[f64; 4]]| ObjectSpec { model: model.into(), waypoints: wps.to_vec() };
        Self {
            name: "default".into(),
            seed: 7,
            duration_s: 60.0,
            frame_rate_hz: 1.0,
            intrinsics: Intrinsics::default(),
            cameras: vec![cam(0, 3.2, 3.0), cam(1, -3.2, 3.0), cam(2, -3.2, -3.0), cam(3, 3.2, -3.0)],
            objects: vec![
                obj("table", &[[0.0, 0.0, 0.0, 10.0]]),
                obj("chair", &[[0.0, 1.2, 0.2, 180.0]]),
                obj("chair", &[[0.0, -1.3, -0.2, 0.0], [20.0, -1.3, -0.2, 0.0], [35.0, -1.3, 0.8, 45.0], [60.0, -1.3, 0.8, 45.0]]),
                obj("chair", &[[0.0, 0.2, 1.25, -90.0], [30.0, 0.2, 1.25, -90.0], [45.0, 1.0, 1.25, -60.0]]),
                obj("chair", &[[0.0, -0.4, -1.3, 90.0]]),
                obj("chair", &[[0.0, 1.3, -1.1, 135.0], [10.0, 1.3, -1.1, 135.0], [25.0, 0.9, -1.3, 160.0], [60.0, 0.9, -1.3, 160.0]]),
            ],
            noise: NoiseConfig::default(),
            occluders: Vec::new(),
            model_files: Vec::new(),
            base_dir: None,
        }
    }

    /// The default scene with the standard noise profile.
    pub fn noisy_scenario(seed: u64) -> Self {
        let mut s = Self::default_scenario();
        s.name = "noisy".into();
        s.seed = seed;
        s.noise = NoiseConfig { keypoint_sigma_px: 2.0, depth_sigma_m: 0.01, keypoint_dropout: 0.1, ..NoiseConfig::default() };
        s
    }

    /// A single chair walking through a 3 s full occlusion.
    pub fn occlusion_scenario(seed: u64) -> Self {
        let mut s = Self::default_scenario();
        s.name = "occlusion".into();
        s.seed = seed;
        s.duration_s = 30.0;
        s.objects = vec![ObjectSpec { model: "chair".into(), waypoints: vec![[0.0, -1.5, 0.0, 0.0], [30.0, 1.5, 0.0, 0.0]] }];
        s.noise = NoiseConfig { keypoint_sigma_px: 1.0, depth_sigma_m: 0.005, ..NoiseConfig::default() };
        // a box enclosing the chair's path while active
        s.occluders = vec![Occluder { min: [-2.0, -0.6, -0.1], max: [2.0, 0.6, 1.2], t_start: 12.0, t_end: 14.5 }];
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_roundtrips() {
        let s = ScenarioConfig::default_scenario();
        s.validate().unwrap();
        assert_eq!(s.num_frames(), 60);
        let back = ScenarioConfig::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn interpolation() {
        let mut s = ScenarioConfig::default_scenario();
        s.objects = vec![ObjectSpec { model: "chair".into(), waypoints: vec![[0.0, 0.0, 0.0, 170.0], [10.0, 2.0, 0.0, -170.0]] }];
        let p = s.object_pose(0, 5.0, 0.0);
        assert!((p.t.x - 1.0).abs() < 1e-12);
        // shortest arc passes through 180°
        assert!((p.yaw().to_degrees().abs() - 180.0).abs() < 1e-9);
        assert_eq!(s.object_pose(0, -1.0, 0.0).t.x, 0.0);
        assert_eq!(s.object_pose(0, 99.0, 0.0).t.x, 2.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut s = ScenarioConfig::default_scenario();
        s.objects[1].waypoints = vec![[0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        assert!(matches!(s.validate(), Err(ConfigError::Invalid(_))));
        let mut s = ScenarioConfig::default_scenario();
        s.frame_rate_hz = 0.0;
        assert!(s.validate().is_err());
        let mut s = ScenarioConfig::default_scenario();
        s.objects[0].model = "sofa".into();
        assert!(s.validate().is_err());
        assert!(matches!(ScenarioConfig::from_toml("name = 3"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn slab_test() {
        let o = Occluder { min: [-1.0, -1.0, -1.0], max: [1.0, 1.0, 1.0], t_start: 0.0, t_end: 1.0 };
        let a = Vector3::new(-5.0, 0.0, 0.0);
        assert!(o.blocks(&a, &Vector3::new(5.0, 0.0, 0.0)));
        assert!(!o.blocks(&a, &Vector3::new(-2.0, 0.0, 0.0)));
        assert!(!o.blocks(&a, &Vector3::new(5.0, 3.0, 0.0)));
        assert!(o.active(0.5) && !o.active(2.0));
    }
}
