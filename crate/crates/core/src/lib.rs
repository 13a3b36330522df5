//! Trajectory anomaly detection for multi-vehicle highway scenes.
//!
//! Vehicles are encoded with vehicle-vehicle and lane-vehicle attention into a
//! Gaussian latent state, propagated one step ahead by learned tridiagonal
//! Koopman operators, and decoded back to displacements. The anomaly score of
//! a timestep is the largest overlap-averaged one-step prediction error over
//! the vehicles in the scene.

pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scene;
pub mod scoring;
pub mod synth;
pub mod tape;
pub mod training;

pub use baselines::{build_variant, cvm_predict, BaselineKind};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{CellKind, ModelConfig, TrainConfig, Variant};
pub use error::{Error, Result};
pub use metrics::{evaluate, MetricReport, Metrics};
pub use model::{BatchInput, Model, Noise, Sampling};
pub use scene::{Label, MapSpec, Point, Scene, Track, WindowBatch};
pub use scoring::{score_scene, score_scenes, Detector, ScoreOptions, ScoreSeries};
pub use synth::{generate, generate_dataset, DatasetSpec, ScenarioKind, ScenarioSpec};
pub use training::{train, TrainOptions, TrainOutcome};
