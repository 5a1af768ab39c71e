use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector3};
use objmap_core::geometry::Pixel;
use objmap_core::model::{ModelLibrary, ObjectModel};
use objmap_core::segmentation::{Frame, Point};
use objmap_core::{CameraModel, KeypointSet2D, PointCloudSegment, Pose, SensorFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scenario::{ConfigError, NoiseConfig, Occluder, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub object: usize,
    pub class_id: u16,
    pub model: String,
    pub position: [f64; 3],
    pub orientation_wxyz: [f64; 4],
}

impl GtObject {
    pub fn pose(&self) -> Pose {
        let [w, x, y, z] = self.orientation_wxyz;
        Pose::new(Vector3::from(self.position), UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, x, y, z)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub index: usize,
    pub timestamp_us: u64,
    pub objects: Vec<GtObject>,
    /// `[camera][object]`: which model keypoints are visible.
    pub visible_keypoints: Vec<Vec<Vec<bool>>>,
    /// `[camera][object]`: visible fraction of keypoints.
    pub visibility: Vec<Vec<f64>>,
}

/// A validated scenario with resolved cameras and models.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: ScenarioConfig,
    pub models: ModelLibrary<f64>,
    pub cameras: Vec<(u16, CameraModel)>,
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, camera: u16, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ 0x5ce7e) ^ ((camera as u64) << 32) ^ frame as u64))
}

fn point_visible(cam_center: &Vector3<f64>, p: &Vector3<f64>, occluders: &[&Occluder]) -> bool {
    !occluders.iter().any(|o| o.blocks(cam_center, p))
}

/// Noise-free keypoint visibility: in front of the camera, inside the image
/// and not hidden by an active occluder.
fn keypoint_visibility(model: &ObjectModel<f64>, pose: &Pose, cam: &CameraModel, occluders: &[&Occluder]) -> Vec<bool> {
    let c = cam.center();
    model
        .keypoints
        .iter()
        .map(|k| {
            let w = pose.apply(k);
            cam.project(&cam.world_to_camera(&w)).is_ok_and(|px| cam.contains(&px)) && point_visible(&c, &w, occluders)
        })
        .collect()
}

/// Simulated detections and depth of one object seen by one camera.
///
/// Keypoints are the projected model keypoints plus Gaussian pixel noise,
/// with random dropout and gross outliers; fewer than four valid keypoints
/// yield no detection. The segment holds the model surface points facing
/// the camera and not occluded, perturbed along the viewing ray, in the
/// camera frame.
pub fn observe(
    model: &ObjectModel<f64>,
    pose: &Pose,
    cam: &CameraModel,
    noise: &NoiseConfig,
    occluders: &[&Occluder],
    rng: &mut ChaCha8Rng,
) -> (Option<KeypointSet2D>, PointCloudSegment) {
    let visible = keypoint_visibility(model, pose, cam, occluders);
    let kp_noise = Normal::new(0.0, noise.keypoint_sigma_px).expect("sigma validated");
    let mut points = Vec::with_capacity(visible.len());
    let mut valid = Vec::with_capacity(visible.len());
    for (k, vis) in model.keypoints.iter().zip(&visible) {
        // draw every random number unconditionally so streams stay aligned
        let (nu, nv) = (kp_noise.sample(rng), kp_noise.sample(rng));
        let dropped = rng.random::<f64>() < noise.keypoint_dropout;
        let outlier = rng.random::<f64>() < noise.outlier_prob;
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        let xc = cam.world_to_camera(&pose.apply(k));
        match cam.project(&xc) {
            Ok(px) if *vis => {
                let (mut u, mut v) = (px.u + nu, px.v + nv);
                if outlier {
                    u += noise.outlier_px * angle.cos();
                    v += noise.outlier_px * angle.sin();
                }
                points.push(Pixel::new(u, v));
                valid.push(!dropped);
            }
            _ => {
                points.push(Pixel::new(f64::NAN, f64::NAN));
                valid.push(false);
            }
        }
    }
    let n_valid = valid.iter().filter(|v| **v).count();
    let detection = (n_valid >= 4).then(|| KeypointSet2D {
        class_id: model.class_id,
        confidences: valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
        points,
        valid,
    });

    let depth_noise = Normal::new(0.0, noise.depth_sigma_m).expect("sigma validated");
    let center = cam.center();
    let mut seg = PointCloudSegment::empty(model.class_id, 0, 0, Frame::Camera);
    for (i, p) in model.cloud.iter().enumerate() {
        let w = pose.apply(p);
        let n = depth_noise.sample(rng);
        if let Some(normal) = model.normals.get(i) {
            if (pose.q * normal).dot(&(center - w)) <= 0.0 {
                continue;
            }
        }
        let xc = cam.world_to_camera(&w);
        let inside = cam.project(&xc).is_ok_and(|px| cam.contains(&px));
        if !inside || !point_visible(&center, &w, occluders) {
            continue;
        }
        let r = xc.norm();
        let mut pt = Point::new(xc * ((r + n) / r), model.class_id);
        pt.rgb = 0x80_80_80;
        seg.points.push(pt);
    }
    (detection, seg)
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let models = config.models()?;
        let cameras = config.camera_models();
        Ok(Self { config, models, cameras })
    }

    pub fn num_frames(&self) -> usize {
        self.config.num_frames()
    }

    fn model(&self, object: usize) -> &ObjectModel<f64> {
        self.models.by_name(&self.config.objects[object].model).expect("models validated")
    }

    fn active_occluders(&self, t: f64) -> Vec<&Occluder> {
        self.config.occluders.iter().filter(|o| o.active(t)).collect()
    }

    pub fn object_pose(&self, object: usize, t: f64) -> Pose {
        self.config.object_pose(object, t, self.model(object).ground_offset)
    }

    pub fn ground_truth(&self, k: usize) -> GroundTruthFrame {
        let t = self.config.frame_time(k);
        let occ = self.active_occluders(t);
        let objects: Vec<GtObject> = (0..self.config.objects.len())
            .map(|i| {
                let pose = self.object_pose(i, t);
                let m = self.model(i);
                GtObject {
                    object: i,
                    class_id: m.class_id,
                    model: m.name.clone(),
                    position: pose.t.into(),
                    orientation_wxyz: pose.wxyz(),
                }
            })
            .collect();
        let visible_keypoints: Vec<Vec<Vec<bool>>> = self
            .cameras
            .iter()
            .map(|(_, cam)| (0..objects.len()).map(|i| keypoint_visibility(self.model(i), &objects[i].pose(), cam, &occ)).collect())
            .collect();
        let visibility = visible_keypoints
            .iter()
            .map(|per_obj| per_obj.iter().map(|v| v.iter().filter(|b| **b).count() as f64 / v.len().max(1) as f64).collect())
            .collect();
        GroundTruthFrame { index: k, timestamp_us: self.config.frame_timestamp_us(k), objects, visible_keypoints, visibility }
    }

    pub fn generate(&self) -> Vec<GroundTruthFrame> {
        (0..self.num_frames()).map(|k| self.ground_truth(k)).collect()
    }

    /// What camera `cam_index` perceives in frame `gt`, with its own RNG stream.
    pub fn observe(&self, gt: &GroundTruthFrame, cam_index: usize) -> SensorFrame {
        let (sensor_id, cam) = &self.cameras[cam_index];
        let mut rng = stream_rng(self.config.seed, *sensor_id, gt.index);
        let noise = &self.config.noise;
        let jitter_us = if noise.clock_jitter_ms > 0.0 {
            (rng.random_range(-1.0..=1.0) * noise.clock_jitter_ms * 1e3).round() as i64
        } else {
            0
        };
        let timestamp_us = (gt.timestamp_us as i64 + jitter_us).max(0) as u64;
        let occ = self.active_occluders(self.config.frame_time(gt.index));
        let mut detections = Vec::new();
        let mut clouds: BTreeMap<u16, PointCloudSegment> = BTreeMap::new();
        for obj in &gt.objects {
            let model = self.model(obj.object);
            let (det, seg) = observe(model, &obj.pose(), cam, noise, &occ, &mut rng);
            detections.extend(det);
            let entry = clouds
                .entry(model.class_id)
                .or_insert_with(|| PointCloudSegment::empty(model.class_id, *sensor_id, timestamp_us, Frame::Camera));
            entry.points.extend(seg.points);
        }
        SensorFrame {
            sensor_id: *sensor_id,
            timestamp_us,
            detections,
            class_clouds: clouds.into_values().filter(|c| !c.is_empty()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_seeds_differ() {
        let a: u64 = stream_rng(1, 0, 0).random();
        let b: u64 = stream_rng(1, 1, 0).random();
        let c: u64 = stream_rng(1, 0, 1).random();
        let d: u64 = stream_rng(2, 0, 0).random();
        assert!(a != b && a != c && a != d && b != c);
        assert_eq!(a, stream_rng(1, 0, 0).random::<u64>());
    }
}
