//! Backend synchronization and multi-view fusion.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{weighted_quat_mean, Pose};
use crate::pose::ObjectObservation;
use crate::scalar::Real;
use crate::segmentation::Point;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum FusionError {
    #[error("cannot fuse an empty group")]
    EmptyGroup,
    #[error("group mixes object classes")]
    MixedClasses,
    #[error("no observation in the group carries a segment")]
    NoSegments,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub sync_window_us: u64,
    /// Single-linkage gate for grouping same-class observations (m).
    pub gating_dist: f64,
    /// Lower clamp on association distance before inverting it into a weight (m).
    pub weight_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { sync_window_us: 250_000, gating_dist: 0.5, weight_eps: 1e-3 }
    }
}

/// Observations from all sensors that belong to one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet<T: Real> {
    pub reference_us: u64,
    /// Ordered by sensor id, then by arrival within the sensor.
    pub observations: Vec<ObjectObservation<T>>,
    /// Sensors that reported a frame in this set, including empty frames.
    pub sensors: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedObject<T: Real> {
    pub class_id: u16,
    pub timestamp_us: u64,
    pub pose: Pose<T>,
    pub ellipsoid: [T; 3],
    pub contributors: Vec<u16>,
    pub total_weight: T,
    pub merged_cluster: Option<Vec<Point<T>>>,
}

#[derive(Debug, Clone)]
struct SensorFrame<T: Real> {
    timestamp_us: u64,
    observations: Vec<ObjectObservation<T>>,
    complete: bool,
}

#[derive(Debug, Clone)]
struct SensorQueue<T: Real> {
    frames: VecDeque<SensorFrame<T>>,
    closed: bool,
}

/// Groups per-sensor observation streams into frame-sets.
///
/// Each set is anchored at the earliest unconsumed frame timestamp `t0` and
/// takes, from every sensor, its next frame if it starts within
/// `t0 + window`. A set is released only once every sensor has either
/// completed a frame beyond the window or closed its stream, so the grouping
/// does not depend on arrival interleaving.
#[derive(Debug, Clone)]
pub struct Synchronizer<T: Real> {
    window_us: u64,
    queues: BTreeMap<u16, SensorQueue<T>>,
    watermark: BTreeMap<u16, u64>,
}

impl<T: Real> Synchronizer<T> {
    pub fn new(sensor_ids: impl IntoIterator<Item = u16>, window_us: u64) -> Self {
        let queues = sensor_ids
            .into_iter()
            .map(|id| (id, SensorQueue { frames: VecDeque::new(), closed: false }))
            .collect();
        Self { window_us, queues, watermark: BTreeMap::new() }
    }

    fn frame_for(&mut self, sensor_id: u16, ts: u64) -> &mut SensorFrame<T> {
        let q = self
            .queues
            .entry(sensor_id)
            .or_insert_with(|| SensorQueue { frames: VecDeque::new(), closed: false });
        if q.frames.back().is_none_or(|f| f.timestamp_us != ts || f.complete) {
            q.frames.push_back(SensorFrame { timestamp_us: ts, observations: Vec::new(), complete: false });
        }
        q.frames.back_mut().expect("just pushed")
    }

    pub fn push(&mut self, obs: ObjectObservation<T>) {
        let (s, ts) = (obs.sensor_id, obs.timestamp_us);
        self.frame_for(s, ts).observations.push(obs);
    }

    /// Marks the frame at `ts` of `sensor_id` as complete (possibly empty).
    pub fn end_frame(&mut self, sensor_id: u16, ts: u64) {
        let f = self.frame_for(sensor_id, ts);
        f.complete = true;
        self.watermark.insert(sensor_id, ts);
    }

    pub fn close(&mut self, sensor_id: u16) {
        if let Some(q) = self.queues.get_mut(&sensor_id) {
            q.closed = true;
            for f in &mut q.frames {
                f.complete = true;
            }
        }
    }

    pub fn close_all(&mut self) {
        let ids: Vec<u16> = self.queues.keys().copied().collect();
        for id in ids {
            self.close(id);
        }
    }

    fn earliest(&self) -> Option<u64> {
        self.queues.values().filter_map(|q| q.frames.front().map(|f| f.timestamp_us)).min()
    }

    fn ready(&self, t0: u64) -> bool {
        let limit = t0 + self.window_us;
        self.queues.iter().all(|(id, q)| {
            q.closed
                || self.watermark.get(id).is_some_and(|w| *w > limit)
                || q.frames.iter().any(|f| f.timestamp_us > limit)
        }) && self.queues.values().all(|q| q.frames.front().is_none_or(|f| f.timestamp_us > limit || f.complete))
    }

    /// Releases every frame-set that can no longer change.
    pub fn pop_ready(&mut self) -> Vec<FrameSet<T>> {
        let mut out = Vec::new();
        while let Some(t0) = self.earliest() {
            if !self.ready(t0) {
                break;
            }
            let limit = t0 + self.window_us;
            let mut set = FrameSet { reference_us: t0, observations: Vec::new(), sensors: Vec::new() };
            for (id, q) in self.queues.iter_mut() {
                if q.frames.front().is_some_and(|f| f.timestamp_us <= limit) {
                    let f = q.frames.pop_front().expect("checked");
                    set.sensors.push(*id);
                    set.observations.extend(f.observations);
                }
            }
            out.push(set);
        }
        out
    }

    pub fn is_drained(&self) -> bool {
        self.queues.values().all(|q| q.frames.is_empty())
    }
}

/// Batch synchronization of complete per-sensor streams.
pub fn synchronize<T: Real>(streams: &BTreeMap<u16, Vec<ObjectObservation<T>>>, window_us: u64) -> Vec<FrameSet<T>> {
    let mut sync = Synchronizer::new(streams.keys().copied(), window_us);
    for (id, obs) in streams {
        for o in obs {
            sync.push(o.clone());
        }
        sync.close(*id);
    }
    sync.pop_ready()
}

/// Single-linkage grouping of same-class observations by position.
///
/// Groups are ordered by their first member; members keep frame-set order.
pub fn group_by_instance<T: Real>(fs: &FrameSet<T>, gating_dist: T) -> Vec<Vec<ObjectObservation<T>>> {
    let obs = &fs.observations;
    let n = obs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if obs[i].class_id == obs[j].class_id && (obs[i].pose.t - obs[j].pose.t).norm() <= gating_dist {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<ObjectObservation<T>>> = BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(o.clone());
    }
    groups.into_values().collect()
}

/// Weighted fusion of one object's observations.
///
/// Weights are `1 / max(assoc_dist, ε)`. Position and ellipsoid axes are
/// weighted means; orientation is the incremental slerp mean in sensor-id
/// order. A single observation passes through unchanged.
pub fn fuse<T: Real>(group: &[ObjectObservation<T>], weight_eps: T) -> Result<FusedObject<T>, FusionError> {
    let first = group.first().ok_or(FusionError::EmptyGroup)?;
    if group.iter().any(|o| o.class_id != first.class_id) {
        return Err(FusionError::MixedClasses);
    }
    let merged_cluster = merge_clusters(group).ok();
    let timestamp_us = group.iter().map(|o| o.timestamp_us).max().unwrap_or(first.timestamp_us);
    if group.len() == 1 {
        return Ok(FusedObject {
            class_id: first.class_id,
            timestamp_us,
            pose: first.pose,
            ellipsoid: first.ellipsoid,
            contributors: vec![first.sensor_id],
            total_weight: T::one() / first.assoc_dist.max(weight_eps),
            merged_cluster,
        });
    }
    let mut order: Vec<&ObjectObservation<T>> = group.iter().collect();
    order.sort_by(|a, b| {
        a.sensor_id
            .cmp(&b.sensor_id)
            .then(a.assoc_dist.partial_cmp(&b.assoc_dist).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| {
                let (pa, pb) = (a.pose.t, b.pose.t);
                (pa.x, pa.y, pa.z).partial_cmp(&(pb.x, pb.y, pb.z)).unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let weights: Vec<T> = order.iter().map(|o| T::one() / o.assoc_dist.max(weight_eps)).collect();
    let total = weights.iter().fold(T::zero(), |a, w| a + *w);
    let t = order.iter().zip(&weights).fold(Vector3::zeros(), |a, (o, w)| a + o.pose.t * *w) / total;
    let mut ellipsoid = [T::zero(); 3];
    for (o, w) in order.iter().zip(&weights) {
        for (e, v) in ellipsoid.iter_mut().zip(o.ellipsoid) {
            *e += v * *w;
        }
    }
    for e in &mut ellipsoid {
        *e /= total;
    }
    let items: Vec<_> = order.iter().zip(&weights).map(|(o, w)| (o.pose.q, *w)).collect();
    let q = weighted_quat_mean(&items).map_err(|_| FusionError::EmptyGroup)?;
    let mut contributors: Vec<u16> = order.iter().map(|o| o.sensor_id).collect();
    contributors.dedup();
    Ok(FusedObject {
        class_id: first.class_id,
        timestamp_us,
        pose: Pose::new(t, q),
        ellipsoid,
        contributors,
        total_weight: total,
        merged_cluster,
    })
}

/// Concatenates the world-frame segments attached to the group.
pub fn merge_clusters<T: Real>(group: &[ObjectObservation<T>]) -> Result<Vec<Point<T>>, FusionError> {
    let mut any = false;
    let mut out = Vec::new();
    for seg in group.iter().filter_map(|o| o.segment.as_ref()) {
        any = true;
        out.extend_from_slice(&seg.points);
    }
    if any {
        Ok(out)
    } else {
        Err(FusionError::NoSegments)
    }
}
