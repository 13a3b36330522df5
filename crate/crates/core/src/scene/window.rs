use crate::error::{Error, Result};
use crate::scene::{Observation, SceneObservations};

/// Default window length in observation steps.
pub const DEFAULT_WINDOW_LENGTH: usize = 15;

/// A fixed-length slice of a scene's observation sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub scene_id: String,
    /// Observation index of the first step.
    pub start: usize,
    /// `observations[vehicle][step]`; `None` marks an absent vehicle-step.
    pub observations: Vec<Vec<Option<Observation>>>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vehicle_count(&self) -> usize {
        self.observations.len()
    }

    pub fn present(&self, vehicle: usize, step: usize) -> bool {
        self.observations[vehicle][step].is_some()
    }
}

/// Start indices of every window of `length` over `steps`, `stride` apart.
pub fn window_starts(steps: usize, length: usize, stride: usize) -> Vec<usize> {
    if steps < length || length == 0 || stride == 0 {
        return Vec::new();
    }
    (0..=steps - length).step_by(stride).collect()
}

pub fn make_windows(
    obs: &SceneObservations,
    length: usize,
    stride: usize,
) -> Result<Vec<WindowBatch>> {
    if length < 2 {
        return Err(Error::Parameter(format!(
            "window length must be at least 2, got {length}"
        )));
    }
    if stride < 1 {
        return Err(Error::Parameter("window stride must be at least 1".into()));
    }
    let steps = obs.steps();
    if steps < length {
        log::warn!(
            "scene `{}` has {steps} observation steps, shorter than window length {length}; no windows",
            obs.scene_id
        );
        return Ok(Vec::new());
    }
    Ok(window_starts(steps, length, stride)
        .into_iter()
        .map(|start| WindowBatch {
            scene_id: obs.scene_id.clone(),
            start,
            observations: obs
                .vehicles
                .iter()
                .map(|seq| seq[start..start + length].to_vec())
                .collect(),
        })
        .collect())
}
