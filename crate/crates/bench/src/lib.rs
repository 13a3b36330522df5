//! Shared fixtures for the criterion benches.

use saber_core::scene::{build_observations, make_windows};
use saber_core::{generate, BatchInput, MapSpec, ScenarioKind, ScenarioSpec, Scene, TrainConfig, WindowBatch};

/// A long two-vehicle overtaking scene.
pub fn scene(duration: usize, seed: u64) -> Scene {
    generate(&ScenarioSpec::new(ScenarioKind::Overtaking, duration, seed), &MapSpec::default()).expect("scene generates")
}

/// `count` default-length windows drawn from synthetic scenes.
pub fn windows(count: usize, config: &TrainConfig) -> Vec<WindowBatch> {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < count {
        let obs = build_observations(&scene(80, seed), config.neighbor_radius).expect("observations");
        out.extend(make_windows(&obs, config.window_length, config.window_stride).expect("windows"));
        seed += 1;
    }
    out.truncate(count);
    out
}

pub fn batch(windows: &[WindowBatch]) -> BatchInput {
    let refs: Vec<&WindowBatch> = windows.iter().collect();
    BatchInput::from_windows(&refs).expect("batch")
}
