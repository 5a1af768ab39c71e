use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use objmap_core::fusion::FusionConfig;
use objmap_core::pose::{PoseConfig, SensorOptions};
use objmap_core::segmentation::SegmentationConfig;
use objmap_core::tracker::TrackerConfig;
use objmap_sim::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::AppError;

/// Which pose refinement the pipeline applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Keypoint PnP only.
    Pnp,
    /// PnP followed by ICP on each sensor.
    IcpLocal,
    /// PnP on the sensors, ICP on the fused cluster in the backend.
    IcpBackend,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Pnp, Variant::IcpLocal, Variant::IcpBackend];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pnp => "pnp",
            Variant::IcpLocal => "icp-local",
            Variant::IcpBackend => "icp-backend",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variant `{s}` (pnp, icp-local, icp-backend)"))
    }
}

/// Object representation kept by the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Known model meshes placed at the tracked poses; observations only.
    Mesh,
    /// Object-centric voxel sub-maps built from streamed segments.
    Submap,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::Mesh => "mesh",
            Representation::Submap => "submap",
        }
    }
}

impl FromStr for Representation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mesh" => Ok(Representation::Mesh),
            "submap" => Ok(Representation::Submap),
            _ => Err(format!("unknown mode `{s}` (mesh, submap)")),
        }
    }
}

/// Resolved configuration of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario file, or one of the built-in names `default`, `noisy`, `occlusion`.
    pub scenario: String,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub variant: Variant,
    pub mode: Representation,
    pub addr: String,
    pub out: PathBuf,
    pub tau_dist: f64,
    pub tau_track: f64,
    pub tau_occ: u32,
    pub sync_window_ms: f64,
    pub voxel_resolution: f64,
    pub track_window: usize,
    pub max_unseen_s: f64,
    pub min_hits_confirm: u32,
    pub instance_gate: f64,
    pub ransac_iters: usize,
    pub ransac_reproj_px: f64,
    pub max_tilt_deg: f64,
    pub icp_max_iters: usize,
    pub icp_corr_dist: f64,
    pub icp_eps: f64,
    pub icp_max_points: usize,
    pub cluster_tol: f64,
    pub min_cluster_points: usize,
    pub sor_k: usize,
    pub sor_std_mult: f64,
    pub max_segment_points: usize,
    pub dilate_px: u32,
    /// Capacity of the bounded queue between connections and the backend.
    pub queue_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pose = PoseConfig::default();
        let seg = SegmentationConfig::default();
        let trk = TrackerConfig::default();
        let fus = FusionConfig::default();
        Self {
            scenario: "default".into(),
            seed: None,
            variant: Variant::IcpLocal,
            mode: Representation::Mesh,
            addr: "127.0.0.1:0".into(),
            out: PathBuf::from("objmap-out"),
            tau_dist: pose.tau_dist,
            tau_track: trk.tau_track,
            tau_occ: trk.tau_occ,
            sync_window_ms: fus.sync_window_us as f64 / 1000.0,
            voxel_resolution: trk.voxel_resolution,
            track_window: trk.window,
            max_unseen_s: trk.max_unseen_s,
            min_hits_confirm: trk.min_hits_confirm,
            instance_gate: fus.gating_dist,
            ransac_iters: pose.ransac_iters,
            ransac_reproj_px: pose.ransac_reproj_thresh,
            max_tilt_deg: pose.max_tilt_deg,
            icp_max_iters: pose.icp_max_iters,
            icp_corr_dist: pose.icp_corr_dist,
            icp_eps: pose.icp_eps,
            icp_max_points: pose.icp_max_points,
            cluster_tol: seg.cluster_tolerance,
            min_cluster_points: seg.min_cluster_points,
            sor_k: seg.sor_k,
            sor_std_mult: seg.sor_stddev_mult,
            max_segment_points: SensorOptions::default().max_segment_points,
            dilate_px: objmap_core::eval::DEFAULT_DILATE_PX,
            queue_capacity: 64,
        }
    }
}

impl RunConfig {
    /// Applies a TOML config file on top of `self`; keys present in the file win.
    pub fn merge_file(&self, path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        self.merge_toml(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }

    pub fn merge_toml(&self, text: &str) -> Result<Self, String> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut base = toml::Table::try_from(self).map_err(|e| e.to_string())?;
        for (k, v) in patch {
            base.insert(k, v);
        }
        base.try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    /// Segments travel when the backend needs them: for sub-maps or backend ICP.
    pub fn streams_segments(&self) -> bool {
        self.mode == Representation::Submap || self.variant == Variant::IcpBackend
    }

    pub fn sync_window_us(&self) -> u64 {
        (self.sync_window_ms * 1000.0).round() as u64
    }

    pub fn validate(&self) -> Result<(), AppError> {
        let positive = [
            ("tau-dist", self.tau_dist),
            ("tau-track", self.tau_track),
            ("voxel-resolution", self.voxel_resolution),
            ("max-unseen-s", self.max_unseen_s),
            ("instance-gate", self.instance_gate),
            ("ransac-reproj-px", self.ransac_reproj_px),
            ("max-tilt-deg", self.max_tilt_deg),
            ("icp-corr-dist", self.icp_corr_dist),
            ("icp-eps", self.icp_eps),
            ("cluster-tol", self.cluster_tol),
            ("sor-std-mult", self.sor_std_mult),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AppError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sync_window_ms >= 0.0 && self.sync_window_ms.is_finite()) {
            return Err(AppError::Config(format!("sync-window-ms must be non-negative, got {}", self.sync_window_ms)));
        }
        let counts = [
            ("tau-occ", self.tau_occ as usize),
            ("track-window", self.track_window),
            ("min-hits-confirm", self.min_hits_confirm as usize),
            ("ransac-iters", self.ransac_iters),
            ("icp-max-iters", self.icp_max_iters),
            ("icp-max-points", self.icp_max_points),
            ("min-cluster-points", self.min_cluster_points),
            ("sor-k", self.sor_k),
            ("max-segment-points", self.max_segment_points),
            ("queue-capacity", self.queue_capacity),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(AppError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Loads the scenario named or pointed to by `scenario`, applying the seed override.
    pub fn load_scenario(&self) -> Result<ScenarioConfig, AppError> {
        let path = Path::new(&self.scenario);
        let mut s = if path.is_file() {
            ScenarioConfig::from_file(path)?
        } else {
            match self.scenario.as_str() {
                "default" => ScenarioConfig::default_scenario(),
                "noisy" => ScenarioConfig::noisy_scenario(ScenarioConfig::default_scenario().seed),
                "occlusion" => ScenarioConfig::occlusion_scenario(ScenarioConfig::default_scenario().seed),
                _ => return Err(AppError::Config(format!("scenario `{}` is neither a file nor a built-in name", self.scenario))),
            }
        };
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn pose_config(&self) -> PoseConfig {
        PoseConfig {
            tau_dist: self.tau_dist,
            ransac_iters: self.ransac_iters,
            ransac_reproj_thresh: self.ransac_reproj_px,
            max_tilt_deg: self.max_tilt_deg,
            icp_max_iters: self.icp_max_iters,
            icp_corr_dist: self.icp_corr_dist,
            icp_eps: self.icp_eps,
            icp_max_points: self.icp_max_points,
            ..PoseConfig::default()
        }
    }

    pub fn segmentation_config(&self) -> SegmentationConfig {
        SegmentationConfig {
            cluster_tolerance: self.cluster_tol,
            min_cluster_points: self.min_cluster_points,
            sor_k: self.sor_k,
            sor_stddev_mult: self.sor_std_mult,
        }
    }

    pub fn sensor_options(&self) -> SensorOptions {
        SensorOptions {
            local_icp: self.variant == Variant::IcpLocal,
            include_segment: self.streams_segments(),
            max_segment_points: self.max_segment_points,
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            tau_track: self.tau_track,
            window: self.track_window,
            max_unseen_s: self.max_unseen_s,
            min_hits_confirm: self.min_hits_confirm,
            voxel_resolution: self.voxel_resolution,
            tau_occ: self.tau_occ,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig { sync_window_us: self.sync_window_us(), gating_dist: self.instance_gate, ..FusionConfig::default() }
    }
}
