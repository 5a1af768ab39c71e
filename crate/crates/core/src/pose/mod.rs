//! Sensor-side object pose estimation.
//!
//! Per frame and class: keypoint detections are lifted to poses with
//! PnP-RANSAC, constrained to the ground plane and turned into keypoint
//! skeletons; skeletons are matched to depth segments by mean
//! keypoint-to-nearest-point distance; matched poses are refined by ICP.

mod association;
mod icp;
mod observation;
mod pnp;

pub use association::{assoc_distance, greedy_associate, skeleton_from_pose, Skeleton3D};
pub use icp::{icp_refine, IcpResult};
pub use observation::{build_observation, ellipsoid_axes, ObjectObservation};
pub use pnp::{pnp_ransac, refine_pose, KeypointSet2D, PnpResult};

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{CameraModel, Pose};
use crate::model::{ModelLibrary, ObjectModel};
use crate::scalar::Real;
use crate::segmentation::{euclidean_cluster, sor_filter, Frame, PointCloudSegment, SegmentationConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoseError {
    #[error("need at least 4 valid keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("no consensus: best hypothesis has {0} inliers")]
    NoConsensus(usize),
    #[error("segment has {0} points, ICP needs at least 10")]
    DegenerateSegment(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseConfig {
    /// Maximum keypoint-to-segment association distance (m).
    pub tau_dist: f64,
    pub ransac_iters: usize,
    pub ransac_reproj_thresh: f64,
    pub ransac_seed: u64,
    /// RANSAC discards hypotheses whose up axis leans further than this
    /// from the world vertical (deg); objects rest on the ground.
    pub max_tilt_deg: f64,
    pub icp_max_iters: usize,
    pub icp_corr_dist: f64,
    pub icp_eps: f64,
    /// ICP uses at most this many evenly spaced segment points.
    pub icp_max_points: usize,
    /// Also snap the height to the model's ground offset when projecting
    /// onto the ground plane.
    pub ground_snap_z: bool,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            tau_dist: 0.30,
            ransac_iters: 100,
            ransac_reproj_thresh: 8.0,
            ransac_seed: 0,
            max_tilt_deg: 30.0,
            icp_max_iters: 50,
            icp_corr_dist: 0.25,
            icp_eps: 1e-6,
            icp_max_points: 500,
            ground_snap_z: true,
        }
    }
}

/// Removes roll and pitch from a world-frame pose, keeping its yaw.
///
/// With `snap_z` the height is set to the model's resting offset.
pub fn ground_project<T: Real>(pose: &Pose<T>, model: &ObjectModel<T>, snap_z: bool) -> Pose<T> {
    let mut t = pose.t;
    if snap_z {
        t.z = model.ground_offset;
    }
    Pose::from_yaw(t, pose.yaw())
}

/// Which refinement the sensor applies before transmitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorOptions {
    pub local_icp: bool,
    pub include_segment: bool,
    /// Cap on transmitted segment size; the full segment is still used locally.
    pub max_segment_points: usize,
}

impl Default for SensorOptions {
    fn default() -> Self {
        Self { local_icp: true, include_segment: false, max_segment_points: 250 }
    }
}

/// Everything one sensor perceives in one frame.
#[derive(Debug, Clone, Default)]
pub struct SensorFrame<T: Real> {
    pub sensor_id: u16,
    pub timestamp_us: u64,
    pub detections: Vec<KeypointSet2D<T>>,
    /// Per-class point clouds in the camera frame, before instance clustering.
    pub class_clouds: Vec<PointCloudSegment<T>>,
}

fn to_world<T: Real>(seg: &PointCloudSegment<T>, cam: &CameraModel<T>) -> PointCloudSegment<T> {
    if seg.frame == Frame::World {
        return seg.clone();
    }
    let mut out = seg.clone();
    for p in &mut out.points {
        p.xyz = cam.extrinsic.apply(&p.xyz);
    }
    out.frame = Frame::World;
    out
}

/// Runs the full sensor-side estimation for one frame.
///
/// Observations are returned class by class (ascending class id), each class
/// in descending segment size.
pub fn process_frame<T: Real>(
    frame: &SensorFrame<T>,
    cam: &CameraModel<T>,
    models: &ModelLibrary<T>,
    seg_cfg: &SegmentationConfig,
    cfg: &PoseConfig,
    opts: &SensorOptions,
) -> Vec<ObjectObservation<T>> {
    let mut classes: Vec<u16> = frame.class_clouds.iter().map(|c| c.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for class_id in classes {
        let Some(model) = models.get(class_id) else { continue };
        let mut segments = Vec::new();
        for cloud in frame.class_clouds.iter().filter(|c| c.class_id == class_id) {
            for cluster in euclidean_cluster(cloud, T::lit(seg_cfg.cluster_tolerance), seg_cfg.min_cluster_points) {
                let filtered = sor_filter(&cluster, seg_cfg.sor_k, T::lit(seg_cfg.sor_stddev_mult));
                if !filtered.is_empty() {
                    segments.push(to_world(&filtered, cam));
                }
            }
        }
        segments.sort_by(|a, b| b.len().cmp(&a.len()));

        let mut skeletons = Vec::new();
        for (i, det) in frame.detections.iter().filter(|d| d.class_id == class_id).enumerate() {
            let mut det_cfg = *cfg;
            det_cfg.ransac_seed = cfg
                .ransac_seed
                .wrapping_add(frame.timestamp_us)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(((frame.sensor_id as u64) << 32) | i as u64);
            let Ok(pnp) = pnp_ransac(det, model, cam, &det_cfg) else { continue };
            let world = ground_project(&cam.extrinsic.compose(&pnp.pose), model, cfg.ground_snap_z);
            skeletons.push(skeleton_from_pose(model, &world));
        }

        for (si, ki) in greedy_associate(&skeletons, &segments, T::lit(cfg.tau_dist)) {
            let segment = &segments[si];
            let skeleton = &skeletons[ki];
            let assoc = assoc_distance(skeleton, segment);
            let mut pose = skeleton.pose;
            if opts.local_icp {
                if let Ok(icp) = icp_refine(model, segment, &pose, cfg) {
                    pose = ground_project(&icp.pose, model, cfg.ground_snap_z);
                }
            }
            let sent = segment.subsample(opts.max_segment_points);
            let mut obs = build_observation(pose, segment, assoc, frame.sensor_id, frame.timestamp_us, false);
            if opts.include_segment {
                obs.segment = Some(sent);
            }
            out.push(obs);
        }
    }
    out
}

/// Rotation whose `z` axis maps onto `up`.
pub(crate) fn align_z<T: Real>(up: &Vector3<T>) -> UnitQuaternion<T> {
    UnitQuaternion::rotation_between(&Vector3::z(), up)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), T::pi()))
}
