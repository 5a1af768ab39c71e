//! Instance tracking with constant-velocity prediction.

use std::collections::VecDeque;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::fusion::FusedObject;
use crate::geometry::Pose;
use crate::scalar::Real;
use crate::submap::VoxelSubMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Association gate on predicted position (m).
    pub tau_track: f64,
    /// Position history length (frames) used for the velocity estimate.
    pub window: usize,
    /// Tracks unseen for longer than this are dropped (s).
    pub max_unseen_s: f64,
    pub min_hits_confirm: u32,
    pub voxel_resolution: f64,
    pub tau_occ: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { tau_track: 0.75, window: 5, max_unseen_s: 10.0, min_hits_confirm: 2, voxel_resolution: 0.05, tau_occ: 2 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.tau_track > 0.0
            && self.window >= 1
            && self.max_unseen_s > 0.0
            && self.min_hits_confirm >= 1
            && self.voxel_resolution > 0.0
            && self.tau_occ >= 1;
        if ok {
            Ok(())
        } else {
            Err(format!("tracker parameters must be positive: {self:?}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedObject<T: Real> {
    pub track_id: u64,
    pub class_id: u16,
    pub pose: Pose<T>,
    pub ellipsoid: [T; 3],
    history: VecDeque<(u64, Vector3<T>)>,
    pub velocity: Vector3<T>,
    pub last_seen_us: u64,
    pub submap: Option<VoxelSubMap<T>>,
    pub hits: u32,
}

fn seconds<T: Real>(dt_us: i128) -> T {
    T::lit(dt_us as f64 * 1e-6)
}

impl<T: Real> TrackedObject<T> {
    pub fn new(track_id: u64, class_id: u16, pose: Pose<T>, t_us: u64) -> Self {
        Self {
            track_id,
            class_id,
            pose,
            ellipsoid: [T::zero(); 3],
            history: VecDeque::from([(t_us, pose.t)]),
            velocity: Vector3::zeros(),
            last_seen_us: t_us,
            submap: None,
            hits: 1,
        }
    }

    pub fn position(&self) -> Vector3<T> {
        self.pose.t
    }

    pub fn history(&self) -> impl Iterator<Item = &(u64, Vector3<T>)> {
        self.history.iter()
    }

    /// Appends to the ring buffer and recomputes velocity from its endpoints.
    pub fn push_history(&mut self, t_us: u64, p: Vector3<T>, window: usize) {
        self.history.push_back((t_us, p));
        while self.history.len() > window.max(1) {
            self.history.pop_front();
        }
        self.velocity = match (self.history.front(), self.history.back()) {
            (Some((t0, p0)), Some((t1, p1))) if t1 > t0 => (p1 - p0) / seconds::<T>(*t1 as i128 - *t0 as i128),
            _ => Vector3::zeros(),
        };
    }

    /// Extrapolated position at `t_now_us`.
    pub fn predict(&self, t_now_us: u64) -> Vector3<T> {
        let dt = seconds::<T>(t_now_us as i128 - self.last_seen_us as i128);
        self.pose.t + self.velocity * dt
    }
}

/// Outcome of one association round. Indices refer to the inputs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Association {
    /// `(observation, track)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_obs: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Globally greedy one-to-one matching: repeatedly takes the smallest
/// remaining entry of `dist[obs][track]` that is within `tau`.
pub fn greedy_match<T: Real>(dist: &[Vec<T>], n_tracks: usize, tau: T) -> Association {
    let mut pairs: Vec<(T, usize, usize)> = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        for (j, d) in row.iter().enumerate() {
            if d.is_finite() && *d <= tau {
                pairs.push((*d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut obs_used = vec![false; dist.len()];
    let mut trk_used = vec![false; n_tracks];
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !obs_used[i] && !trk_used[j] {
            obs_used[i] = true;
            trk_used[j] = true;
            matches.push((i, j));
        }
    }
    matches.sort_unstable();
    Association {
        matches,
        unmatched_obs: (0..dist.len()).filter(|i| !obs_used[*i]).collect(),
        unmatched_tracks: (0..n_tracks).filter(|j| !trk_used[*j]).collect(),
    }
}

/// Same-class nearest-neighbour association against predicted positions.
pub fn associate<T: Real>(tracks: &[TrackedObject<T>], fused: &[FusedObject<T>], t_now_us: u64, tau_track: T) -> Association {
    let predicted: Vec<_> = tracks.iter().map(|t| t.predict(t_now_us)).collect();
    let dist: Vec<Vec<T>> = fused
        .iter()
        .map(|o| {
            tracks
                .iter()
                .zip(&predicted)
                .map(|(t, p)| if t.class_id == o.class_id { (o.pose.t - p).norm() } else { T::lit(f64::INFINITY) })
                .collect()
        })
        .collect();
    greedy_match(&dist, tracks.len(), tau_track)
}

#[derive(Debug, Clone)]
pub struct Tracker<T: Real> {
    pub config: TrackerConfig,
    tracks: Vec<TrackedObject<T>>,
    next_id: u64,
    /// Whether matched fused clusters are integrated into sub-maps.
    pub build_submaps: bool,
}

impl<T: Real> Tracker<T> {
    pub fn new(config: TrackerConfig) -> Self {
        Self { config, tracks: Vec::new(), next_id: 1, build_submaps: true }
    }

    pub fn tracks(&self) -> &[TrackedObject<T>] {
        &self.tracks
    }

    pub fn confirmed(&self) -> impl Iterator<Item = &TrackedObject<T>> {
        self.tracks.iter().filter(|t| t.hits >= self.config.min_hits_confirm)
    }

    pub fn associate(&self, fused: &[FusedObject<T>], t_now_us: u64) -> Association {
        associate(&self.tracks, fused, t_now_us, T::lit(self.config.tau_track))
    }

    fn integrate(&self, track: &mut TrackedObject<T>, obj: &FusedObject<T>) {
        if !self.build_submaps {
            return;
        }
        if let Some(cluster) = &obj.merged_cluster {
            let map = track
                .submap
                .get_or_insert_with(|| VoxelSubMap::new(T::lit(self.config.voxel_resolution), self.config.tau_occ));
            map.integrate(cluster.iter().map(|p| &p.xyz), &obj.pose);
        }
    }

    /// Applies matches and spawns tracks for unmatched observations.
    /// Returns the ids of tracks touched in this step.
    pub fn update(&mut self, assoc: &Association, fused: &[FusedObject<T>], t_now_us: u64) -> Vec<u64> {
        let mut touched = Vec::new();
        let window = self.config.window;
        for &(oi, ti) in &assoc.matches {
            let obj = &fused[oi];
            let mut track = self.tracks[ti].clone();
            track.pose = obj.pose;
            track.ellipsoid = obj.ellipsoid;
            track.push_history(t_now_us, obj.pose.t, window);
            track.last_seen_us = t_now_us;
            track.hits += 1;
            self.integrate(&mut track, obj);
            touched.push(track.track_id);
            self.tracks[ti] = track;
        }
        for &oi in &assoc.unmatched_obs {
            let obj = &fused[oi];
            let mut track = TrackedObject::new(self.next_id, obj.class_id, obj.pose, t_now_us);
            self.next_id += 1;
            track.ellipsoid = obj.ellipsoid;
            self.integrate(&mut track, obj);
            touched.push(track.track_id);
            self.tracks.push(track);
        }
        touched
    }

    /// Drops tracks unseen for more than `max_unseen_s`.
    pub fn cleanup(&mut self, t_now_us: u64) -> Vec<u64> {
        let limit = self.config.max_unseen_s;
        let mut removed = Vec::new();
        self.tracks.retain(|t| {
            let keep = (t_now_us as i128 - t.last_seen_us as i128) as f64 * 1e-6 <= limit;
            if !keep {
                removed.push(t.track_id);
            }
            keep
        });
        removed
    }

    /// One backend step: associate, update, clean up.
    pub fn step(&mut self, fused: &[FusedObject<T>], t_now_us: u64) -> Vec<u64> {
        let assoc = self.associate(fused, t_now_us);
        let touched = self.update(&assoc, fused, t_now_us);
        self.cleanup(t_now_us);
        touched
    }

    pub fn snapshot(&self, t_now_us: u64, frame_index: u64) -> SceneSnapshot {
        let tracks = self
            .confirmed()
            .map(|t| TrackSnapshot {
                track_id: t.track_id,
                class_id: t.class_id,
                position: t.pose.t.map(|v| v.as_f64()).into(),
                orientation_wxyz: t.pose.wxyz().map(|v| v.as_f64()),
                velocity: t.velocity.map(|v| v.as_f64()).into(),
                ellipsoid: t.ellipsoid.map(|v| v.as_f64()),
                hits: t.hits,
                last_seen_us: t.last_seen_us,
                submap: None,
                occupied_voxels: t.submap.as_ref().map_or(0, |m| m.occupied_indices().count()),
            })
            .collect();
        SceneSnapshot { frame_index, timestamp_us: t_now_us, tracks }
    }
}

/// Per-frame scene state of confirmed tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub frame_index: u64,
    pub timestamp_us: u64,
    pub tracks: Vec<TrackSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSnapshot {
    pub track_id: u64,
    pub class_id: u16,
    pub position: [f64; 3],
    pub orientation_wxyz: [f64; 4],
    pub velocity: [f64; 3],
    pub ellipsoid: [f64; 3],
    pub hits: u32,
    pub last_seen_us: u64,
    /// Path of the exported sub-map, relative to the run directory.
    pub submap: Option<String>,
    pub occupied_voxels: usize,
}
