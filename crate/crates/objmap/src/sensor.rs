//! Smart-sensor side: perception on simulated input, then streaming.

use std::io::Write;

use objmap_core::pose::{process_frame, PoseConfig, SensorOptions};
use objmap_core::protocol::{SensorSession, SessionLog, StreamMode};
use objmap_core::segmentation::SegmentationConfig;
use objmap_core::ObjectObservation;
use objmap_sim::Simulation;

use crate::{AppError, RunConfig};

/// One camera of a simulation together with its perception settings.
#[derive(Debug, Clone)]
pub struct SensorPipeline {
    pub sim: Simulation,
    pub cam_index: usize,
    pub seg: SegmentationConfig,
    pub pose: PoseConfig,
    pub opts: SensorOptions,
}

impl SensorPipeline {
    pub fn new(sim: Simulation, cam_index: usize, cfg: &RunConfig) -> Self {
        Self { sim, cam_index, seg: cfg.segmentation_config(), pose: cfg.pose_config(), opts: cfg.sensor_options() }
    }

    pub fn sensor_id(&self) -> u16 {
        self.sim.cameras[self.cam_index].0
    }

    /// Observations of frame `k`, in the world frame.
    pub fn frame(&self, k: usize) -> (u64, Vec<ObjectObservation>) {
        let gt = self.sim.ground_truth(k);
        let input = self.sim.observe(&gt, self.cam_index);
        let cam = &self.sim.cameras[self.cam_index].1;
        let obs = process_frame(&input, cam, &self.sim.models, &self.seg, &self.pose, &self.opts);
        (input.timestamp_us, obs)
    }

    /// Processes every frame and streams the results to `writer`.
    pub fn run<W: Write>(&self, writer: W) -> Result<SessionLog, AppError> {
        let mode = if self.opts.include_segment { StreamMode::WithSegments } else { StreamMode::ObservationsOnly };
        let mut session = SensorSession::new(writer, self.sensor_id(), mode);
        for k in 0..self.sim.num_frames() {
            let (ts, obs) = self.frame(k);
            log::debug!("sensor {} frame {k}: {} observations", self.sensor_id(), obs.len());
            session.send_frame(ts, &obs)?;
        }
        let (_, log) = session.finish().map_err(|e| AppError::Worker(format!("sensor {}: {e}", self.sensor_id())))?;
        Ok(log)
    }
}

/// Writes to two sinks, e.g. a socket and a replay file.
pub struct Tee<A: Write, B: Write>(pub A, pub B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}
