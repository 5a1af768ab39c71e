//! Deterministic scene simulator standing in for the detection front-end.
//!
//! A [`ScenarioConfig`] describes cameras, objects moving along waypoint
//! trajectories, a noise model and occluder boxes. [`Simulation`] turns it
//! into ground-truth frames and per-camera [`SensorFrame`]s (noisy 2D
//! keypoints plus per-class depth point clouds). All randomness is derived
//! from the scenario seed.
//!
//! [`SensorFrame`]: objmap_core::SensorFrame

pub mod replay;
pub mod scenario;
pub mod simulate;

pub use replay::{read_stream, replay_to, stream_file_name, ReplayError, Timing};
pub use scenario::{CameraSpec, ConfigError, Intrinsics, NoiseConfig, ObjectSpec, Occluder, ScenarioConfig};
pub use simulate::{observe, stream_rng, GroundTruthFrame, GtObject, Simulation};
