//! Object-level semantic mapping from a network of smart RGB-D sensors.
//!
//! Sensors estimate object poses from 2D keypoints and depth segments and
//! stream compact observations to a backend that fuses views, keeps
//! object-centric voxel sub-maps and tracks instances over time.
//!
//! The numeric modules are generic over [`Real`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which is what the wire format and
//! the evaluation use.

pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod mask;
pub mod model;
pub mod pose;
pub mod protocol;
pub mod scalar;
pub mod segmentation;
pub mod spatial;
pub mod submap;
pub mod tracker;

pub use nalgebra;
pub use scalar::Real;

pub type Pose = geometry::Pose<f64>;
pub type Pose32 = geometry::Pose<f32>;
pub type CameraModel = geometry::CameraModel<f64>;
pub type CameraModel32 = geometry::CameraModel<f32>;
pub type Pixel = geometry::Pixel<f64>;
pub type ObjectModel = model::ObjectModel<f64>;
pub type ModelLibrary = model::ModelLibrary<f64>;
pub type PointCloudSegment = segmentation::PointCloudSegment<f64>;
pub type SegmentPoint = segmentation::Point<f64>;
pub type DepthFrame = segmentation::DepthFrame<f64>;
pub type KeypointSet2D = pose::KeypointSet2D<f64>;
pub type Skeleton3D = pose::Skeleton3D<f64>;
pub type ObjectObservation = pose::ObjectObservation<f64>;
pub type SensorFrame = pose::SensorFrame<f64>;
pub type FusedObject = fusion::FusedObject<f64>;
pub type FrameSet = fusion::FrameSet<f64>;
pub type VoxelSubMap = submap::VoxelSubMap<f64>;
pub type TrackedObject = tracker::TrackedObject<f64>;
pub type Tracker = tracker::Tracker<f64>;
