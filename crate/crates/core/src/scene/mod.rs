//! Scene data model: maps, trajectories, observations and windows.

mod io;
mod map;
mod observe;
mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    import_maad, load_scenes, read_scenes, save_scenes, write_scenes, MaadLabel, MaadSequence,
    SCENE_SCHEMA_VERSION,
};
pub use map::{
    discretize_map, lane_nodes_for, BlockIndex, BlockIndexer, Direction, LaneTuple, MapSpec,
    FRONT, LEFT, RIGHT,
};
pub use observe::{build_observations, Neighbor, Observation, SceneObservations, DEFAULT_NEIGHBOR_RADIUS};
pub use window::{make_windows, window_starts, WindowBatch, DEFAULT_WINDOW_LENGTH};

/// A 2-D coordinate or displacement in meters.
pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Ignored,
    Abnormal,
}

/// One vehicle's positions; `None` where the vehicle is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub vehicle_id: u32,
    pub positions: Vec<Option<Point>>,
}

impl Track {
    pub fn is_present(&self, t: usize) -> bool {
        self.positions.get(t).is_some_and(Option::is_some)
    }
}

/// A multi-vehicle trajectory episode with per-timestep ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub timestep_dt: f64,
    pub anomaly_type: Option<String>,
    pub map: MapSpec,
    pub labels: Vec<Label>,
    pub tracks: Vec<Track>,
}

impl Scene {
    /// Trajectory length `T`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::SceneLoad {
                scene_id: self.scene_id.clone(),
                reason,
            })
        };
        if let Err(e) = self.map.validate() {
            return fail(e.to_string());
        }
        if !(self.timestep_dt > 0.0) || !self.timestep_dt.is_finite() {
            return fail("timestep_dt must be positive".into());
        }
        for track in &self.tracks {
            if track.positions.len() != self.labels.len() {
                return fail(format!(
                    "vehicle {} has {} positions but {} labels",
                    track.vehicle_id,
                    track.positions.len(),
                    self.labels.len()
                ));
            }
            for (t, p) in track.positions.iter().enumerate() {
                if let Some(p) = p {
                    if !p[0].is_finite() || !p[1].is_finite() {
                        return fail(format!(
                            "non-finite coordinate for vehicle {} at t={t}",
                            track.vehicle_id
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_abnormal(&self) -> bool {
        self.labels.contains(&Label::Abnormal)
    }
}
