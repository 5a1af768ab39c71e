//! Object-centric sparse voxel sub-maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{CameraModel, Pose};
use crate::mask::Mask;
use crate::scalar::Real;

pub type VoxelIndex = [i64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum SubMapError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Voxel boundary tie tolerance, as a fraction of the resolution.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Occupancy counts on a sparse grid anchored in the object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSubMap<T: Real> {
    resolution: T,
    pub tau_occ: u32,
    counts: BTreeMap<VoxelIndex, u32>,
}

impl<T: Real> VoxelSubMap<T> {
    /// Panics on a non-positive resolution.
    pub fn new(resolution: T, tau_occ: u32) -> Self {
        assert!(resolution > T::zero(), "voxel resolution must be positive");
        Self { resolution, tau_occ, counts: BTreeMap::new() }
    }

    pub fn resolution(&self) -> T {
        self.resolution
    }

    pub fn counts(&self) -> &BTreeMap<VoxelIndex, u32> {
        &self.counts
    }

    pub fn count(&self, idx: &VoxelIndex) -> u32 {
        self.counts.get(idx).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Points within [`BOUNDARY_TOL`] voxels below a face count as lying on
    /// it, so round-off from the rigid transform cannot flip a boundary
    /// point into the lower neighbour.
    pub fn index_of(&self, p: &Vector3<T>) -> VoxelIndex {
        let f = |c: T| (c / self.resolution + T::lit(BOUNDARY_TOL)).floor().as_f64() as i64;
        [f(p.x), f(p.y), f(p.z)]
    }

    pub fn center_of(&self, idx: &VoxelIndex) -> Vector3<T> {
        let c = |i: i64| (T::lit(i as f64) + T::lit(0.5)) * self.resolution;
        Vector3::new(c(idx[0]), c(idx[1]), c(idx[2]))
    }

    /// Adds one hit per world point, expressed in the frame of `object_pose`.
    pub fn integrate<'a>(&mut self, points: impl IntoIterator<Item = &'a Vector3<T>>, object_pose: &Pose<T>) {
        let inv = object_pose.inverse();
        for p in points {
            let idx = self.index_of(&inv.apply(p));
            *self.counts.entry(idx).or_insert(0) += 1;
        }
    }

    pub fn add_count(&mut self, idx: VoxelIndex, n: u32) {
        if n > 0 {
            *self.counts.entry(idx).or_insert(0) += n;
        }
    }

    pub fn occupied_indices(&self) -> impl Iterator<Item = &VoxelIndex> {
        self.counts.iter().filter(|(_, c)| **c >= self.tau_occ).map(|(k, _)| k)
    }

    /// Centers of voxels whose count reached `tau_occ`, in the object frame.
    pub fn occupied(&self) -> Vec<Vector3<T>> {
        self.occupied_indices().map(|i| self.center_of(i)).collect()
    }

    /// Union of the filled projected cubes of all occupied voxels.
    ///
    /// Voxels with a corner at or behind the image plane are skipped.
    pub fn render_mask(&self, object_pose: &Pose<T>, cam: &CameraModel<T>) -> Mask {
        let mut mask = Mask::new(cam.width, cam.height);
        let h = self.resolution * T::lit(0.5);
        let mut corners = [Vector2::zeros(); 8];
        'voxel: for idx in self.occupied_indices() {
            let c = self.center_of(idx);
            for (k, corner) in corners.iter_mut().enumerate() {
                let s = |bit: usize| if k & bit != 0 { h } else { -h };
                let local = c + Vector3::new(s(1), s(2), s(4));
                let xc = cam.world_to_camera(&object_pose.apply(&local));
                match cam.project(&xc) {
                    Ok(px) => *corner = Vector2::new(px.u, px.v),
                    Err(_) => continue 'voxel,
                }
            }
            mask.fill_convex_hull(&corners);
        }
        mask
    }

    /// Text export of the occupied voxels.
    pub fn export_text(&self, object_pose: &Pose<T>) -> String {
        let mut s = String::new();
        let [w, x, y, z] = object_pose.wxyz().map(|v| v.as_f64());
        let t = object_pose.t.map(|v| v.as_f64());
        let _ = writeln!(s, "# objmap voxel sub-map");
        let _ = writeln!(s, "resolution {}", self.resolution.as_f64());
        let _ = writeln!(s, "tau_occ {}", self.tau_occ);
        let _ = writeln!(s, "pose {} {} {} {} {} {} {}", t.x, t.y, t.z, w, x, y, z);
        let occ: Vec<_> = self.counts.iter().filter(|(_, c)| **c >= self.tau_occ).collect();
        let _ = writeln!(s, "voxels {}", occ.len());
        for (k, c) in occ {
            let _ = writeln!(s, "{} {} {} {}", k[0], k[1], k[2], c);
        }
        s
    }

    /// Parses [`export_text`](Self::export_text) output back into a map and pose.
    pub fn parse_text(text: &str) -> Result<(Self, Pose<T>), SubMapError> {
        let err = |line: usize, msg: &str| SubMapError::Parse { line, msg: msg.to_string() };
        let mut resolution = None;
        let mut tau = None;
        let mut pose = None;
        let mut expected = None;
        let mut counts = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let mut it = raw.split_whitespace();
            let head = it.next().unwrap_or_default();
            let rest: Vec<&str> = it.collect();
            let nums = |k: usize| -> Result<Vec<f64>, SubMapError> {
                let v: Result<Vec<f64>, _> = rest.iter().map(|s| s.parse::<f64>()).collect();
                let v = v.map_err(|_| err(line, "bad number"))?;
                if v.len() != k {
                    return Err(err(line, "wrong field count"));
                }
                Ok(v)
            };
            match head {
                "resolution" => {
                    let r = nums(1)?[0];
                    if !(r > 0.0) {
                        return Err(err(line, "resolution must be positive"));
                    }
                    resolution = Some(r);
                }
                "tau_occ" => tau = Some(rest.first().and_then(|s| s.parse::<u32>().ok()).ok_or_else(|| err(line, "bad tau_occ"))?),
                "pose" => {
                    let v = nums(7)?;
                    let l = T::lit;
                    pose = Some(Pose::from_wxyz(Vector3::new(l(v[0]), l(v[1]), l(v[2])), l(v[3]), l(v[4]), l(v[5]), l(v[6])));
                }
                "voxels" => expected = Some(rest.first().and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| err(line, "bad voxel count"))?),
                _ => {
                    let fields: Vec<&str> = raw.split_whitespace().collect();
                    if fields.len() != 4 {
                        return Err(err(line, "expected `ix iy iz count`"));
                    }
                    let i: Result<Vec<i64>, _> = fields[..3].iter().map(|s| s.parse::<i64>()).collect();
                    let i = i.map_err(|_| err(line, "bad voxel index"))?;
                    let c = fields[3].parse::<u32>().map_err(|_| err(line, "bad count"))?;
                    if c == 0 {
                        return Err(err(line, "zero count"));
                    }
                    counts.insert([i[0], i[1], i[2]], c);
                }
            }
        }
        let resolution = resolution.ok_or_else(|| err(0, "missing resolution"))?;
        let tau_occ = tau.ok_or_else(|| err(0, "missing tau_occ"))?;
        let pose = pose.ok_or_else(|| err(0, "missing pose"))?;
        if expected.is_some_and(|e| e != counts.len()) {
            return Err(err(0, "voxel count does not match header"));
        }
        Ok((Self { resolution: T::lit(resolution), tau_occ, counts }, pose))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ObjectModel;

    #[test]
    fn integrate_examples() {
        let mut m = VoxelSubMap::<f64>::new(0.05, 2);
        m.integrate([].iter(), &Pose::identity());
        assert!(m.is_empty());
        m.integrate([Vector3::zeros()].iter(), &Pose::identity());
        assert_eq!(m.count(&[0, 0, 0]), 1);
        m.integrate([Vector3::new(-0.01, 0.049, 0.05)].iter(), &Pose::identity());
        assert_eq!(m.count(&[-1, 0, 1]), 1);
    }

    #[test]
    fn frame_invariance() {
        let model = ObjectModel::<f64>::chair();
        let p = Pose::from_yaw(Vector3::new(1.3, -2.1, 0.0), 0.7);
        let world: Vec<_> = model.cloud.iter().map(|x| p.apply(x)).collect();
        let mut a = VoxelSubMap::new(0.05, 1);
        a.integrate(world.iter(), &p);
        let mut b = VoxelSubMap::new(0.05, 1);
        b.integrate(model.cloud.iter(), &Pose::identity());
        // float round-off may move points lying exactly on a boundary
        let diff = a.counts().keys().filter(|k| !b.counts().contains_key(*k)).count();
        assert!(diff * 100 <= b.len(), "{diff} of {}", b.len());
    }

    #[test]
    fn occupied_examples() {
        let mut m = VoxelSubMap::<f64>::new(0.05, 2);
        m.integrate([Vector3::new(0.01, 0.01, 0.01)].iter(), &Pose::identity());
        assert!(m.occupied().is_empty());
        m.integrate([Vector3::new(0.02, 0.02, 0.02)].iter(), &Pose::identity());
        let occ = m.occupied();
        assert_eq!(occ.len(), 1);
        assert!((occ[0] - Vector3::repeat(0.025)).norm() < 1e-15);
    }

    #[test]
    fn repeated_integration_equals_voxelization() {
        let model = ObjectModel::<f64>::table();
        let mut m = VoxelSubMap::new(0.05, 3);
        for _ in 0..3 {
            m.integrate(model.cloud.iter(), &Pose::identity());
        }
        let mut oracle = std::collections::BTreeSet::new();
        for p in &model.cloud {
            let f = |c: f64| (c / 0.05 + 1e-9).floor() as i64;
            oracle.insert([f(p.x), f(p.y), f(p.z)]);
        }
        let got: std::collections::BTreeSet<_> = m.occupied_indices().copied().collect();
        assert_eq!(got, oracle);
    }

    fn cam() -> CameraModel<f64> {
        CameraModel::new(600.0, 600.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn render_examples() {
        let mut m = VoxelSubMap::<f64>::new(0.05, 1);
        assert_eq!(m.render_mask(&Pose::identity(), &cam()).count(), 0);
        // voxel (0,0,0) centered at (0.025,..); anchor it 2 m in front of the camera
        m.add_count([0, 0, 0], 1);
        let pose = Pose::from_translation(Vector3::new(-0.025, -0.025, 1.975));
        let mask = m.render_mask(&pose, &cam());
        let expect = (600.0f64 * 0.05 / 2.0).powi(2);
        let area = mask.count() as f64;
        assert!((area - expect).abs() <= 0.25 * expect, "{area} vs {expect}");
        assert!(mask.get(320, 240));
        let mut prev = mask.count();
        for i in 1..10 {
            m.add_count([i, i % 3, 0], 1);
            let c = m.render_mask(&pose, &cam()).count();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn text_roundtrip() {
        let mut m = VoxelSubMap::<f64>::new(0.05, 2);
        m.add_count([1, -2, 3], 5);
        m.add_count([0, 0, 0], 1);
        let pose = Pose::from_yaw(Vector3::new(0.1, 0.2, 0.0), 0.3);
        let text = m.export_text(&pose);
        assert!(text.lines().any(|l| l == "1 -2 3 5"));
        let (back, p) = VoxelSubMap::<f64>::parse_text(&text).unwrap();
        assert_eq!(p.t, pose.t);
        assert!(crate::geometry::geodesic_deg(&p.q, &pose.q) < 1e-9);
        assert_eq!(back.occupied(), m.occupied());
        assert!(VoxelSubMap::<f64>::parse_text("resolution 0.05\n1 2 3\n").is_err());
    }
}
