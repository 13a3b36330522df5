//! Per-timestep latent coordinates for scatter plots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchInput, Model, Sampling};
use crate::scene::{build_observations, Label, Scene, WindowBatch};

/// Latent state of one vehicle at one scene timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub scene_id: String,
    pub vehicle: u32,
    pub timestep: usize,
    pub label: Label,
    pub anomaly_type: Option<String>,
    pub mean: Vec<f64>,
    /// Ones for deterministic variants.
    pub deviation: Vec<f64>,
    /// Propagated mean for the next timestep, if the variant predicts.
    pub propagated_mean: Option<Vec<f64>>,
}

/// Encodes each vehicle's whole track in one pass (no windowing) and reads
/// out the current and propagated latent means.
pub fn latent_trace(model: &Model, scene: &Scene, neighbor_radius: f64) -> Result<Vec<LatentPoint>> {
    let obs = build_observations(scene, neighbor_radius)?;
    if obs.steps() < 2 {
        return Err(Error::Parameter(format!(
            "scene `{}` is too short to encode",
            scene.scene_id
        )));
    }
    let window = WindowBatch {
        scene_id: obs.scene_id.clone(),
        start: 0,
        observations: obs.vehicles.clone(),
    };
    let batch = BatchInput::from_windows(&[&window])?;
    let pass = model.forward(&batch, Sampling::Mean, (0.0, 0.0))?;
    let j = model.config.latent_dim;
    let mut points = Vec::new();
    for (k, step) in pass.steps.iter().enumerate() {
        let mean = pass.tape.value(step.mean);
        let dev = step.deviation.map(|d| pass.tape.value(d));
        let prop = step.propagated_mean.map(|p| pass.tape.value(p));
        for (row, &(_, v)) in batch.sources.iter().enumerate() {
            if !batch.steps[k].present[row] {
                continue;
            }
            let timestep = k + 1;
            points.push(LatentPoint {
                scene_id: scene.scene_id.clone(),
                vehicle: scene.tracks[v].vehicle_id,
                timestep,
                label: scene.labels[timestep],
                anomaly_type: scene.anomaly_type.clone(),
                mean: mean.row(row).to_vec(),
                deviation: dev.map_or_else(|| vec![1.0; j], |d| d.row(row).to_vec()),
                propagated_mean: prop.map(|p| p.row(row).to_vec()),
            });
        }
    }
    Ok(points)
}
