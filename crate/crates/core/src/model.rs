//! Object models known a priori on both sensors and backend.
//!
//! A model file is TOML:
//!
//! ```toml
//! class_id = 1
//! name = "chair"
//! ground_offset = 0.0
//! splat_radius = 0.015
//! keypoints = [[0.225, 0.225, 0.47], ...]
//! cloud = "chair.xyz"
//! ```
//!
//! `cloud` is a path relative to the model file. Each line of the cloud file
//! holds `x y z` or `x y z nx ny nz` separated by whitespace; `#` starts a
//! comment.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

pub const CHAIR_CLASS: u16 = 1;
pub const TABLE_CLASS: u16 = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid model file {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T: Real> {
    pub min: Vector3<T>,
    pub max: Vector3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<T>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb { min: first, max: first };
        for p in it {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn contains(&self, p: &Vector3<T>, tol: T) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn corners(&self) -> [Vector3<T>; 8] {
        let (a, b) = (self.min, self.max);
        std::array::from_fn(|i| {
            Vector3::new(
                if i & 1 == 0 { a.x } else { b.x },
                if i & 2 == 0 { a.y } else { b.y },
                if i & 4 == 0 { a.z } else { b.z },
            )
        })
    }
}

/// Rigid object class with keypoints and a surface point sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel<T: Real> {
    pub class_id: u16,
    pub name: String,
    pub keypoints: Vec<Vector3<T>>,
    pub cloud: Vec<Vector3<T>>,
    /// Outward surface normals, parallel to `cloud`; may be empty.
    pub normals: Vec<Vector3<T>>,
    /// Height of the object origin above the ground when resting.
    pub ground_offset: T,
    pub extent: Aabb<T>,
    /// Disc radius used when splat-rendering the cloud.
    pub splat_radius: T,
}

impl<T: Real> ObjectModel<T> {
    pub fn new(
        class_id: u16,
        name: impl Into<String>,
        keypoints: Vec<Vector3<T>>,
        cloud: Vec<Vector3<T>>,
        normals: Vec<Vector3<T>>,
        ground_offset: T,
        splat_radius: T,
    ) -> Result<Self, String> {
        if cloud.is_empty() {
            return Err("model cloud is empty".into());
        }
        if keypoints.len() < 4 {
            return Err("at least 4 keypoints required".into());
        }
        if !normals.is_empty() && normals.len() != cloud.len() {
            return Err("normals must match cloud length".into());
        }
        let extent = Aabb::from_points(cloud.iter().chain(keypoints.iter())).expect("non-empty");
        Ok(Self {
            class_id,
            name: name.into(),
            keypoints,
            cloud,
            normals,
            ground_offset,
            extent,
            splat_radius,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    /// Chair with 6 keypoints: 4 seat corners and 2 backrest tops.
    pub fn chair() -> Self {
        let h = T::lit(0.02);
        let mut parts = Vec::new();
        // seat, backrest (at -x), four legs
        parts.push(([-0.225, -0.225, 0.43], [0.225, 0.225, 0.47]));
        parts.push(([-0.225, -0.225, 0.47], [-0.185, 0.225, 0.90]));
        for (x, y) in [(-0.225, -0.225), (-0.225, 0.185), (0.185, -0.225), (0.185, 0.185)] {
            parts.push(([x, y, 0.0], [x + 0.04, y + 0.04, 0.43]));
        }
        let (cloud, normals) = sample_boxes(&parts, h);
        let kp = [
            [0.225, 0.225, 0.47],
            [0.225, -0.225, 0.47],
            [-0.185, -0.225, 0.47],
            [-0.185, 0.225, 0.47],
            [-0.205, -0.225, 0.90],
            [-0.205, 0.225, 0.90],
        ];
        let keypoints = kp.iter().map(|p| v3(*p)).collect();
        Self::new(CHAIR_CLASS, "chair", keypoints, cloud, normals, T::zero(), T::lit(0.015))
            .expect("built-in chair is valid")
    }

    /// Table with 8 keypoints: 4 tabletop corners and 4 leg feet.
    pub fn table() -> Self {
        let h = T::lit(0.025);
        let mut parts = vec![([-0.6, -0.4, 0.72], [0.6, 0.4, 0.76])];
        for (x, y) in [(-0.575, -0.375), (-0.575, 0.325), (0.525, -0.375), (0.525, 0.325)] {
            parts.push(([x, y, 0.0], [x + 0.05, y + 0.05, 0.72]));
        }
        let (cloud, normals) = sample_boxes(&parts, h);
        let kp = [
            [0.6, 0.4, 0.76],
            [0.6, -0.4, 0.76],
            [-0.6, -0.4, 0.76],
            [-0.6, 0.4, 0.76],
            [0.55, 0.35, 0.0],
            [0.55, -0.35, 0.0],
            [-0.55, -0.35, 0.0],
            [-0.55, 0.35, 0.0],
        ];
        let keypoints = kp.iter().map(|p| v3(*p)).collect();
        Self::new(TABLE_CLASS, "table", keypoints, cloud, normals, T::zero(), T::lit(0.018))
            .expect("built-in table is valid")
    }

    /// Looks up a built-in model by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "chair" => Some(Self::chair()),
            "table" => Some(Self::table()),
            _ => None,
        }
    }
}

/// Models indexed by class id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelLibrary<T: Real> {
    models: std::collections::BTreeMap<u16, ObjectModel<T>>,
}

impl<T: Real> ModelLibrary<T> {
    pub fn new() -> Self {
        Self { models: Default::default() }
    }

    /// Chair and table.
    pub fn builtin() -> Self {
        let mut lib = Self::new();
        lib.insert(ObjectModel::chair());
        lib.insert(ObjectModel::table());
        lib
    }

    pub fn insert(&mut self, model: ObjectModel<T>) {
        self.models.insert(model.class_id, model);
    }

    pub fn get(&self, class_id: u16) -> Option<&ObjectModel<T>> {
        self.models.get(&class_id)
    }

    pub fn by_name(&self, name: &str) -> Option<&ObjectModel<T>> {
        self.models.values().find(|m| m.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObjectModel<T>> {
        self.models.values()
    }
}

fn v3<T: Real>(p: [f64; 3]) -> Vector3<T> {
    Vector3::new(T::lit(p[0]), T::lit(p[1]), T::lit(p[2]))
}

/// Samples the six faces of each box with one point per grid cell, jittered
/// inside the cell by a fixed-seed RNG. A strict lattice would give
/// point-to-point ICP spurious minima at half the spacing.
fn sample_boxes<T: Real>(boxes: &[([f64; 3], [f64; 3])], spacing: T) -> (Vec<Vector3<T>>, Vec<Vector3<T>>) {
    let spacing = spacing.as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b1ec7);
    let mut cloud = Vec::new();
    let mut normals = Vec::new();
    for (lo, hi) in boxes {
        for axis in 0..3 {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let na = ((hi[a] - lo[a]) / spacing).ceil().max(1.0) as usize;
            let nb = ((hi[b] - lo[b]) / spacing).ceil().max(1.0) as usize;
            for (side, value) in [(-1.0, lo[axis]), (1.0, hi[axis])] {
                for i in 0..na {
                    for j in 0..nb {
                        let mut p = [0.0; 3];
                        p[axis] = value;
                        let (ja, jb): (f64, f64) = (rng.random(), rng.random());
                        p[a] = lo[a] + (i as f64 + ja) * (hi[a] - lo[a]) / na as f64;
                        p[b] = lo[b] + (j as f64 + jb) * (hi[b] - lo[b]) / nb as f64;
                        let mut n = [0.0; 3];
                        n[axis] = side;
                        cloud.push(v3(p));
                        normals.push(v3(n));
                    }
                }
            }
        }
    }
    (cloud, normals)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    class_id: u16,
    name: String,
    ground_offset: f64,
    #[serde(default = "default_splat")]
    splat_radius: f64,
    keypoints: Vec<[f64; 3]>,
    cloud: PathBuf,
}

fn default_splat() -> f64 {
    0.015
}

/// Reads a model file and its referenced cloud.
pub fn load_model<T: Real>(path: &Path) -> Result<ObjectModel<T>, ModelError> {
    let invalid = |reason: String| ModelError::Invalid { path: path.to_path_buf(), reason };
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let file: ModelFile = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
    let cloud_path = path.parent().unwrap_or(Path::new(".")).join(&file.cloud);
    let cloud_text = fs::read_to_string(&cloud_path).map_err(|source| ModelError::Io { path: cloud_path.clone(), source })?;
    let mut cloud = Vec::new();
    let mut normals = Vec::new();
    for (lineno, line) in cloud_text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| invalid(format!("cloud line {}: {e}", lineno + 1)))?;
        match vals.len() {
            3 => cloud.push(v3([vals[0], vals[1], vals[2]])),
            6 => {
                cloud.push(v3([vals[0], vals[1], vals[2]]));
                normals.push(v3([vals[3], vals[4], vals[5]]));
            }
            n => return Err(invalid(format!("cloud line {}: expected 3 or 6 values, got {n}", lineno + 1))),
        }
    }
    if !normals.is_empty() && normals.len() != cloud.len() {
        return Err(invalid("normals given for only some cloud points".into()));
    }
    let keypoints = file.keypoints.iter().map(|p| v3(*p)).collect();
    ObjectModel::new(
        file.class_id,
        file.name,
        keypoints,
        cloud,
        normals,
        T::lit(file.ground_offset),
        T::lit(file.splat_radius),
    )
    .map_err(invalid)
}

/// Writes `model` as `<dir>/<name>.toml` plus `<dir>/<name>.xyz`.
pub fn save_model<T: Real>(model: &ObjectModel<T>, dir: &Path) -> Result<PathBuf, ModelError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let cloud_name = format!("{}.xyz", model.name);
    let mut cloud = String::new();
    for (i, p) in model.cloud.iter().enumerate() {
        cloud.push_str(&format!("{} {} {}", p.x.as_f64(), p.y.as_f64(), p.z.as_f64()));
        if let Some(n) = model.normals.get(i) {
            cloud.push_str(&format!(" {} {} {}", n.x.as_f64(), n.y.as_f64(), n.z.as_f64()));
        }
        cloud.push('\n');
    }
    let cloud_path = dir.join(&cloud_name);
    fs::write(&cloud_path, cloud).map_err(io(&cloud_path))?;
    let file = ModelFile {
        class_id: model.class_id,
        name: model.name.clone(),
        ground_offset: model.ground_offset.as_f64(),
        splat_radius: model.splat_radius.as_f64(),
        keypoints: model.keypoints.iter().map(|k| [k.x.as_f64(), k.y.as_f64(), k.z.as_f64()]).collect(),
        cloud: PathBuf::from(cloud_name),
    };
    let path = dir.join(format!("{}.toml", model.name));
    let text = toml::to_string(&file).map_err(|e| ModelError::Invalid { path: path.clone(), reason: e.to_string() })?;
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}
