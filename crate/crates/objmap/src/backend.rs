//! Backend: synchronization, fusion, optional cluster ICP, tracking, export.

use objmap_core::fusion::{fuse, group_by_instance, FrameSet, FusionConfig, Synchronizer};
use objmap_core::model::ModelLibrary;
use objmap_core::pose::{ground_project, icp_refine, PoseConfig};
use objmap_core::protocol::ReceivedFrame;
use objmap_core::segmentation::{Frame, PointCloudSegment};
use objmap_core::tracker::{SceneSnapshot, Tracker};

use crate::{Representation, RunConfig, Variant};

/// Output of one processed frame-set.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendOutput {
    pub snapshot: SceneSnapshot,
    /// `(path relative to the run directory, file contents)`.
    pub submaps: Vec<(String, String)>,
}

pub struct Backend {
    sync: Synchronizer<f64>,
    tracker: Tracker<f64>,
    models: ModelLibrary<f64>,
    fusion: FusionConfig,
    pose: PoseConfig,
    backend_icp: bool,
    export_submaps: bool,
    frame_index: u64,
}

impl Backend {
    pub fn new(cfg: &RunConfig, sensor_ids: impl IntoIterator<Item = u16>, models: ModelLibrary<f64>) -> Self {
        let fusion = cfg.fusion_config();
        let mut tracker = Tracker::new(cfg.tracker_config());
        tracker.build_submaps = cfg.mode == Representation::Submap;
        Self {
            sync: Synchronizer::new(sensor_ids, fusion.sync_window_us),
            tracker,
            models,
            fusion,
            pose: cfg.pose_config(),
            backend_icp: cfg.variant == Variant::IcpBackend,
            export_submaps: cfg.mode == Representation::Submap,
            frame_index: 0,
        }
    }

    pub fn tracker(&self) -> &Tracker<f64> {
        &self.tracker
    }

    pub fn on_frame(&mut self, frame: ReceivedFrame) -> Vec<BackendOutput> {
        for o in frame.observations {
            self.sync.push(o);
        }
        self.sync.end_frame(frame.sensor_id, frame.timestamp_us);
        self.drain()
    }

    pub fn on_close(&mut self, sensor_id: u16) -> Vec<BackendOutput> {
        self.sync.close(sensor_id);
        self.drain()
    }

    /// Treats every stream as ended and flushes the remaining frame-sets.
    pub fn finish(&mut self) -> Vec<BackendOutput> {
        self.sync.close_all();
        self.drain()
    }

    fn drain(&mut self) -> Vec<BackendOutput> {
        let sets = self.sync.pop_ready();
        sets.into_iter().map(|fs| self.process(fs)).collect()
    }

    /// Fuses, refines and tracks one frame-set.
    pub fn process(&mut self, fs: FrameSet<f64>) -> BackendOutput {
        let groups = group_by_instance(&fs, self.fusion.gating_dist);
        let mut fused = Vec::with_capacity(groups.len());
        for g in &groups {
            let Ok(mut obj) = fuse(g, self.fusion.weight_eps) else { continue };
            if self.backend_icp {
                if let (Some(model), Some(cluster)) = (self.models.get(obj.class_id), &obj.merged_cluster) {
                    let seg = PointCloudSegment {
                        points: cluster.clone(),
                        frame: Frame::World,
                        timestamp_us: fs.reference_us,
                        sensor_id: 0,
                        class_id: obj.class_id,
                    };
                    if let Ok(r) = icp_refine(model, &seg, &obj.pose, &self.pose) {
                        obj.pose = ground_project(&r.pose, model, self.pose.ground_snap_z);
                    }
                }
            }
            fused.push(obj);
        }
        self.tracker.step(&fused, fs.reference_us);
        let mut snapshot = self.tracker.snapshot(fs.reference_us, self.frame_index);
        let mut submaps = Vec::new();
        if self.export_submaps {
            for (snap, track) in snapshot.tracks.iter_mut().zip(self.tracker.confirmed()) {
                if let Some(map) = &track.submap {
                    let path = format!("submaps/{:04}/track_{}.txt", self.frame_index, track.track_id);
                    submaps.push((path.clone(), map.export_text(&track.pose)));
                    snap.submap = Some(path);
                }
            }
        }
        self.frame_index += 1;
        BackendOutput { snapshot, submaps }
    }
}
