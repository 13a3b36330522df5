use crate::error::{Error, Result};
use crate::scene::{discretize_map, lane_nodes_for, Point, Scene};

/// Default inter-vehicle observation radius in meters.
pub const DEFAULT_NEIGHBOR_RADIUS: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Index of the other vehicle within the scene's track list.
    pub vehicle: usize,
    /// `c_t(other) - c_t(self)`.
    pub displacement: Point,
}

/// Everything a vehicle observes at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `c_t - c_{t-1}`.
    pub displacement: Point,
    /// Lane node minus current position, in front/left/right order. Masked
    /// slots hold zeros.
    pub lanes: [Point; 3],
    pub lane_mask: [bool; 3],
    /// Vehicles within the observation radius, ordered by vehicle index.
    pub neighbors: Vec<Neighbor>,
}

/// Per-vehicle observation sequences for one scene.
///
/// Observation index `k` corresponds to scene timestep `k + 1`; the first
/// timestep has no displacement and is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObservations {
    pub scene_id: String,
    /// `vehicles[i][k]`, `None` where vehicle `i` is not present at both
    /// `k` and `k + 1`.
    pub vehicles: Vec<Vec<Option<Observation>>>,
}

impl SceneObservations {
    /// Number of observation steps (`T - 1`).
    pub fn steps(&self) -> usize {
        self.vehicles.first().map_or(0, Vec::len)
    }

    pub fn vehicle_count(&self) -> usize {
        self.vehicles.len()
    }

    /// Scene timestep for observation index `k`.
    pub fn timestep_of(k: usize) -> usize {
        k + 1
    }
}

pub fn build_observations(scene: &Scene, radius: f64) -> Result<SceneObservations> {
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!(
            "neighbor radius must be positive, got {radius}"
        )));
    }
    if scene.len() < 2 {
        return Err(Error::Parameter(format!(
            "scene `{}` has {} timesteps; at least 2 are needed",
            scene.scene_id,
            scene.len()
        )));
    }
    let indexer = discretize_map(&scene.map)?;
    let steps = scene.len() - 1;
    let mut vehicles = Vec::with_capacity(scene.tracks.len());

    for (i, track) in scene.tracks.iter().enumerate() {
        let mut seq = Vec::with_capacity(steps);
        for t in 1..scene.len() {
            let (Some(prev), Some(cur)) = (track.positions[t - 1], track.positions[t]) else {
                seq.push(None);
                continue;
            };
            let tuple = lane_nodes_for(cur, &scene.map, &indexer);
            let mut lanes = [[0.0; 2]; 3];
            for (slot, node) in tuple.nodes.iter().enumerate() {
                if let Some(node) = node {
                    lanes[slot] = [node[0] - cur[0], node[1] - cur[1]];
                }
            }
            let neighbors = scene
                .tracks
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(j, other)| {
                    let p = other.positions[t]?;
                    let disp = [p[0] - cur[0], p[1] - cur[1]];
                    (disp[0].hypot(disp[1]) <= radius).then_some(Neighbor {
                        vehicle: j,
                        displacement: disp,
                    })
                })
                .collect();
            seq.push(Some(Observation {
                displacement: [cur[0] - prev[0], cur[1] - prev[1]],
                lanes,
                lane_mask: tuple.mask(),
                neighbors,
            }));
        }
        vehicles.push(seq);
    }

    Ok(SceneObservations {
        scene_id: scene.scene_id.clone(),
        vehicles,
    })
}
