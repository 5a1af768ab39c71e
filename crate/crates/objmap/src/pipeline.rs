//! Run orchestration and artifact layout.
//!
//! A run directory contains:
//!
//! ```text
//! run.json            resolved RunConfig
//! scenario.toml       the scenario actually simulated
//! ground_truth.jsonl  one GroundTruthFrame per line
//! snapshots.jsonl     one SceneSnapshot per frame-set
//! sessions.json       per-sensor byte accounting and bandwidth
//! replay/sensor_<id>.omap   recorded sensor byte streams
//! submaps/<frame>/track_<id>.txt   (submap mode)
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use objmap_core::protocol::{bandwidth_report, BandwidthReport, SessionLog};
use objmap_sim::replay::stream_file_name;
use objmap_sim::{replay_to, ScenarioConfig, Simulation, Timing};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendOutput};
use crate::sensor::{SensorPipeline, Tee};
use crate::transport::{connect, BackendServer};
use crate::{AppError, RunConfig};

pub const RUN_FILE: &str = "run.json";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshots.jsonl";
pub const SESSIONS_FILE: &str = "sessions.json";
pub const REPLAY_DIR: &str = "replay";

const ACCEPT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionsFile {
    /// As counted by the sensors.
    pub sensors: Vec<SessionLog>,
    /// As counted by the backend.
    pub backend: Vec<SessionLog>,
    pub bandwidth: BandwidthReport,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub snapshots: usize,
    pub bandwidth: BandwidthReport,
    pub elapsed: Duration,
}

fn write_file(path: &Path, contents: &str) -> Result<(), AppError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| AppError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes") + "\n"
}

/// Scenario copy that stays loadable from inside the run directory.
fn scenario_copy(s: &ScenarioConfig) -> String {
    let mut s = s.clone();
    if let Some(base) = &s.base_dir {
        s.model_files = s.model_files.iter().map(|f| if f.is_relative() { base.join(f) } else { f.clone() }).collect();
    }
    s.to_toml()
}

fn prepare(cfg: &RunConfig) -> Result<Simulation, AppError> {
    cfg.validate()?;
    let scenario = cfg.load_scenario()?;
    Ok(Simulation::new(scenario)?)
}

fn write_header(cfg: &RunConfig, sim: &Simulation) -> Result<(), AppError> {
    fs::create_dir_all(&cfg.out).map_err(|e| AppError::io(&cfg.out, e))?;
    write_file(&cfg.out.join(RUN_FILE), &to_json(cfg))?;
    write_file(&cfg.out.join(SCENARIO_FILE), &scenario_copy(&sim.config))?;
    let mut gt = String::new();
    for f in sim.generate() {
        gt.push_str(&serde_json::to_string(&f).expect("ground truth serializes"));
        gt.push('\n');
    }
    write_file(&cfg.out.join(GROUND_TRUTH_FILE), &gt)
}

/// Writes snapshots and sub-map files as the backend produces them.
struct ArtifactSink {
    dir: PathBuf,
    snapshots: BufWriter<File>,
    count: usize,
}

impl ArtifactSink {
    fn new(dir: &Path) -> Result<Self, AppError> {
        let path = dir.join(SNAPSHOT_FILE);
        let f = File::create(&path).map_err(|e| AppError::io(&path, e))?;
        Ok(Self { dir: dir.to_path_buf(), snapshots: BufWriter::new(f), count: 0 })
    }

    fn accept(&mut self, out: BackendOutput) -> Result<(), AppError> {
        for (rel, text) in &out.submaps {
            write_file(&self.dir.join(rel), text)?;
        }
        let line = serde_json::to_string(&out.snapshot).expect("snapshot serializes");
        let path = self.dir.join(SNAPSHOT_FILE);
        writeln!(self.snapshots, "{line}").map_err(|e| AppError::io(&path, e))?;
        self.count += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<usize, AppError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        self.snapshots.flush().map_err(|e| AppError::io(&path, e))?;
        Ok(self.count)
    }
}

fn replay_writer(dir: &Path, sensor_id: u16) -> Result<BufWriter<File>, AppError> {
    let dir = dir.join(REPLAY_DIR);
    fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    let path = dir.join(stream_file_name(sensor_id));
    Ok(BufWriter::new(File::create(&path).map_err(|e| AppError::io(&path, e))?))
}

fn join<T>(handles: Vec<thread::JoinHandle<Result<T, AppError>>>) -> Result<Vec<T>, AppError> {
    let mut out = Vec::new();
    let mut err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(v)) => out.push(v),
            Ok(Err(e)) => {
                err.get_or_insert(e);
            }
            Err(_) => {
                err.get_or_insert(AppError::Worker("sensor thread panicked".into()));
            }
        }
    }
    err.map_or(Ok(out), Err)
}

fn serve_into(
    cfg: &RunConfig,
    sim: &Simulation,
    server: BackendServer,
    connections: usize,
) -> Result<(usize, Vec<SessionLog>), AppError> {
    let mut backend = Backend::new(cfg, sim.cameras.iter().map(|c| c.0), sim.models.clone());
    let mut sink = ArtifactSink::new(&cfg.out)?;
    let logs = server.serve(connections, cfg.queue_capacity, ACCEPT_TIMEOUT, &mut backend, |o| sink.accept(o))?;
    Ok((sink.finish()?, logs))
}

fn finish_run(cfg: &RunConfig, snapshots: usize, sensors: Vec<SessionLog>, backend: Vec<SessionLog>, start: Instant) -> Result<RunSummary, AppError> {
    let bandwidth = bandwidth_report(if sensors.is_empty() { &backend } else { &sensors }, None);
    let file = SessionsFile { sensors, backend, bandwidth: bandwidth.clone() };
    write_file(&cfg.out.join(SESSIONS_FILE), &to_json(&file))?;
    Ok(RunSummary { out: cfg.out.clone(), snapshots, bandwidth, elapsed: start.elapsed() })
}

/// Runs all sensors and the backend in-process over loopback TCP.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary, AppError> {
    let start = Instant::now();
    let sim = prepare(cfg)?;
    let server = BackendServer::bind(&cfg.addr)?;
    let addr = server.local_addr().to_string();
    write_header(cfg, &sim)?;
    let mut handles = Vec::new();
    for cam_index in 0..sim.cameras.len() {
        let pipeline = SensorPipeline::new(sim.clone(), cam_index, cfg);
        let replay = replay_writer(&cfg.out, pipeline.sensor_id())?;
        let addr = addr.clone();
        handles.push(thread::spawn(move || {
            let stream = BufWriter::new(connect(&addr)?);
            pipeline.run(Tee(stream, replay))
        }));
    }
    let served = serve_into(cfg, &sim, server, sim.cameras.len());
    let sensor_logs = join(handles);
    let (snapshots, backend_logs) = served?;
    finish_run(cfg, snapshots, sensor_logs?, backend_logs, start)
}

/// Runs only the backend, waiting for one connection per scenario camera.
pub fn run_backend(cfg: &RunConfig) -> Result<RunSummary, AppError> {
    let start = Instant::now();
    let sim = prepare(cfg)?;
    let server = BackendServer::bind(&cfg.addr)?;
    log::info!("backend listening on {}", server.local_addr());
    write_header(cfg, &sim)?;
    let (snapshots, logs) = serve_into(cfg, &sim, server, sim.cameras.len())?;
    finish_run(cfg, snapshots, Vec::new(), logs, start)
}

/// Runs one camera's sensor pipeline against a remote backend.
pub fn run_sensor_process(cfg: &RunConfig, camera_id: u16, record: Option<&Path>) -> Result<SessionLog, AppError> {
    let sim = prepare(cfg)?;
    let cam_index = sim
        .cameras
        .iter()
        .position(|c| c.0 == camera_id)
        .ok_or_else(|| AppError::Config(format!("scenario has no camera {camera_id}")))?;
    let pipeline = SensorPipeline::new(sim, cam_index, cfg);
    let stream = BufWriter::new(connect(&cfg.addr)?);
    match record {
        Some(dir) => pipeline.run(Tee(stream, replay_writer(dir, camera_id)?)),
        None => pipeline.run(stream),
    }
}

/// Simulates all sensors and records their streams without a backend.
pub fn run_sim(cfg: &RunConfig) -> Result<RunSummary, AppError> {
    let start = Instant::now();
    let sim = prepare(cfg)?;
    write_header(cfg, &sim)?;
    let handles: Vec<_> = (0..sim.cameras.len())
        .map(|cam_index| {
            let pipeline = SensorPipeline::new(sim.clone(), cam_index, cfg);
            let out = cfg.out.clone();
            thread::spawn(move || pipeline.run(replay_writer(&out, pipeline.sensor_id())?))
        })
        .collect();
    let logs = join(handles)?;
    finish_run(cfg, 0, logs, Vec::new(), start)
}

/// Loads the configuration a run directory was produced with.
pub fn load_run_config(dir: &Path) -> Result<RunConfig, AppError> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|_| AppError::MissingArtifacts(path.display().to_string()))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| AppError::BadArtifact { path: path.clone(), msg: e.to_string() })?;
    cfg.scenario = dir.join(SCENARIO_FILE).display().to_string();
    cfg.seed = None;
    Ok(cfg)
}

/// Re-runs the backend on the streams recorded in `from`, writing a new run to `out`.
pub fn run_replay(from: &Path, out: &Path, timing: Timing) -> Result<RunSummary, AppError> {
    let start = Instant::now();
    let mut cfg = load_run_config(from)?;
    cfg.out = out.to_path_buf();
    let sim = prepare(&cfg)?;
    let files: Vec<PathBuf> = sim.cameras.iter().map(|c| from.join(REPLAY_DIR).join(stream_file_name(c.0))).collect();
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return Err(AppError::MissingArtifacts(missing.display().to_string()));
    }
    for f in &files {
        objmap_sim::read_stream(f)?;
    }
    let server = BackendServer::bind(&cfg.addr)?;
    let addr = server.local_addr().to_string();
    write_header(&cfg, &sim)?;
    let handles: Vec<_> = files
        .into_iter()
        .map(|file| {
            let addr = addr.clone();
            thread::spawn(move || -> Result<(), AppError> {
                let mut stream = BufWriter::new(connect(&addr)?);
                replay_to(&file, &mut stream, timing)?;
                Ok(())
            })
        })
        .collect();
    let served = serve_into(&cfg, &sim, server, sim.cameras.len());
    join(handles)?;
    let (snapshots, logs) = served?;
    finish_run(&cfg, snapshots, Vec::new(), logs, start)
}
