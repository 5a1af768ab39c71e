//! Offline evaluation of run directories against ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use objmap_core::eval::{
    iou_dilated, match_to_ground_truth, render_model_mask, rot_error, trans_error, EvalReport, FrameRecord, VariantReport,
};
use objmap_core::nalgebra::Vector3;
use objmap_core::submap::VoxelSubMap;
use objmap_core::tracker::SceneSnapshot;
use objmap_core::Pose;
use objmap_sim::{GroundTruthFrame, ScenarioConfig, Simulation};
use serde::de::DeserializeOwned;

use crate::pipeline::{load_run_config, SessionsFile, GROUND_TRUTH_FILE, SCENARIO_FILE, SESSIONS_FILE, SNAPSHOT_FILE};
use crate::{AppError, Representation, RunConfig};

pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const FRAME_RECORDS: &str = "eval_frames.jsonl";

fn read_required(path: &Path) -> Result<String, AppError> {
    fs::read_to_string(path).map_err(|_| AppError::MissingArtifacts(path.display().to_string()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, AppError> {
    read_required(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AppError::BadArtifact { path: path.to_path_buf(), msg: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

/// Everything needed to score one run directory.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub sim: Simulation,
    pub ground_truth: Vec<GroundTruthFrame>,
    pub snapshots: Vec<SceneSnapshot>,
    pub sessions: SessionsFile,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self, AppError> {
        let config = load_run_config(dir)?;
        let scenario_path = dir.join(SCENARIO_FILE);
        read_required(&scenario_path)?;
        let sim = Simulation::new(ScenarioConfig::from_file(&scenario_path)?)?;
        let ground_truth = read_jsonl(&dir.join(GROUND_TRUTH_FILE))?;
        let snapshots = read_jsonl(&dir.join(SNAPSHOT_FILE))?;
        let sessions_path = dir.join(SESSIONS_FILE);
        let sessions = serde_json::from_str(&read_required(&sessions_path)?)
            .map_err(|e| AppError::BadArtifact { path: sessions_path, msg: e.to_string() })?;
        Ok(Self { dir: dir.to_path_buf(), config, sim, ground_truth, snapshots, sessions })
    }

    fn gt_for(&self, ts: u64) -> Option<&GroundTruthFrame> {
        self.ground_truth.iter().min_by_key(|g| g.timestamp_us.abs_diff(ts))
    }

    /// Per-object records for every track updated in each snapshot.
    pub fn frame_records(&self, dilate_px: u32) -> Result<Vec<FrameRecord>, AppError> {
        let mut records = Vec::new();
        for snap in &self.snapshots {
            let Some(gt) = self.gt_for(snap.timestamp_us) else { continue };
            let fresh: Vec<_> = snap.tracks.iter().filter(|t| t.last_seen_us == snap.timestamp_us).collect();
            let est: Vec<(u16, Pose)> = fresh.iter().map(|t| (t.class_id, track_pose(&t.position, &t.orientation_wxyz))).collect();
            let truth: Vec<(u16, Pose)> = gt.objects.iter().map(|o| (o.class_id, o.pose())).collect();
            for (ei, gi) in match_to_ground_truth(&est, &truth) {
                let track = fresh[ei];
                let (est_pose, gt_pose) = (&est[ei].1, &truth[gi].1);
                let model = self.sim.models.get(track.class_id).ok_or_else(|| AppError::BadArtifact {
                    path: self.dir.join(SNAPSHOT_FILE),
                    msg: format!("unknown class {}", track.class_id),
                })?;
                let submap = match &track.submap {
                    Some(rel) => {
                        let path = self.dir.join(rel);
                        let text = read_required(&path)?;
                        let (map, _) = VoxelSubMap::<f64>::parse_text(&text)
                            .map_err(|e| AppError::BadArtifact { path: path.clone(), msg: e.to_string() })?;
                        Some(map)
                    }
                    None => None,
                };
                let iou = self
                    .sim
                    .cameras
                    .iter()
                    .enumerate()
                    .map(|(ci, (_, cam))| {
                        let visible = gt.visibility.get(ci).and_then(|v| v.get(gt.objects[gi].object)).copied().unwrap_or(0.0);
                        if visible <= 0.0 {
                            return None;
                        }
                        let gt_mask = render_model_mask(model, gt_pose, cam);
                        let pred = match &submap {
                            Some(map) => map.render_mask(est_pose, cam),
                            None => render_model_mask(model, est_pose, cam),
                        };
                        iou_dilated(&pred, &gt_mask, dilate_px).ok()
                    })
                    .collect();
                records.push(FrameRecord {
                    frame_index: snap.frame_index,
                    timestamp_us: snap.timestamp_us,
                    track_id: track.track_id,
                    gt_object: gt.objects[gi].object,
                    class_id: track.class_id,
                    trans_cm: trans_error(est_pose, gt_pose),
                    rot_deg: rot_error(est_pose, gt_pose),
                    iou,
                });
            }
        }
        Ok(records)
    }
}

pub fn track_pose(position: &[f64; 3], wxyz: &[f64; 4]) -> Pose {
    Pose::from_wxyz(Vector3::from(*position), wxyz[0], wxyz[1], wxyz[2], wxyz[3])
}

/// Run directories under `root`: `root` itself if it holds a run, otherwise
/// its immediate subdirectories that do, in variant order.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>, AppError> {
    if root.join(crate::pipeline::RUN_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|_| AppError::MissingArtifacts(root.display().to_string()))?;
    let mut runs: Vec<(Option<crate::Variant>, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::pipeline::RUN_FILE).is_file())
        .map(|p| (p.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok()), p))
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(AppError::MissingArtifacts(format!("no run directories under {}", root.display())));
    }
    Ok(runs.into_iter().map(|(_, p)| p).collect())
}

fn bandwidth_key(cfg: &RunConfig) -> String {
    match (cfg.mode, cfg.streams_segments()) {
        (Representation::Mesh, true) => "mesh+segments".into(),
        (m, _) => m.name().into(),
    }
}

/// Evaluates every run under `root` and writes `report.txt`, `report.json`
/// there, plus per-frame records into each run directory.
pub fn run_eval(root: &Path, dilate_px: Option<u32>) -> Result<EvalReport, AppError> {
    let mut report = EvalReport { variants: Vec::new(), bandwidth: BTreeMap::new() };
    for dir in find_runs(root)? {
        let run = RunArtifacts::load(&dir)?;
        let records = run.frame_records(dilate_px.unwrap_or(run.config.dilate_px))?;
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r).expect("record serializes"));
            lines.push('\n');
        }
        let path = dir.join(FRAME_RECORDS);
        fs::write(&path, lines).map_err(|e| AppError::io(&path, e))?;
        report.variants.push(VariantReport::aggregate(&run.sim.config.name, run.config.variant.name(), &records));
        report.bandwidth.entry(bandwidth_key(&run.config)).or_insert(run.sessions.bandwidth.clone());
    }
    let text = report.to_table();
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    for (name, body) in [(REPORT_TEXT, &text), (REPORT_JSON, &json)] {
        let path = root.join(name);
        fs::write(&path, body).map_err(|e| AppError::io(&path, e))?;
    }
    Ok(report)
}
