//! Window-wise prediction errors, overlap averaging and per-timestep
//! anomaly scores.
//!
//! Each window yields one error per vehicle and predicted step. A vehicle's
//! error at an observation step is the mean over every window that predicts
//! it, and the scene's anomaly score at that step is the maximum of those
//! means over vehicles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::cvm_window_errors;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{BatchInput, Model, Noise, Sampling};
use crate::scene::{build_observations, make_windows, Label, Scene, WindowBatch};

/// Windows per forward pass when scoring.
const SCORE_BATCH: usize = 64;

/// `errors[vehicle][offset]` for one window; `None` where nothing is
/// predicted or the vehicle is absent.
pub type WindowErrors = Vec<Vec<Option<f64>>>;

/// Anything that maps a window to per-vehicle per-step errors.
#[derive(Debug, Clone)]
pub enum Detector {
    /// Constant-velocity baseline.
    Cvm,
    Model(Box<Model>),
}

impl Detector {
    pub fn name(&self) -> &'static str {
        match self {
            Detector::Cvm => "cvm",
            Detector::Model(m) => m.variant().as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub window_length: usize,
    pub window_stride: usize,
    pub neighbor_radius: f64,
    /// Monte-Carlo draws for stochastic models; 0 scores with `z = mu`.
    pub samples: usize,
    pub seed: u64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for ScoreOptions {
    fn from(c: &TrainConfig) -> Self {
        ScoreOptions {
            window_length: c.window_length,
            window_stride: c.window_stride,
            neighbor_radius: c.neighbor_radius,
            samples: 0,
            seed: c.seed,
        }
    }
}

/// Per-window errors of `detector`, one entry per window in input order.
///
/// Models report the prediction error of every step after the first, or the
/// reconstruction error of every step for reconstruction-only variants.
pub fn window_pred_errors(detector: &Detector, windows: &[WindowBatch], options: &ScoreOptions) -> Result<Vec<WindowErrors>> {
    match detector {
        Detector::Cvm => Ok(windows.iter().map(cvm_window_errors).collect()),
        Detector::Model(model) => {
            let mut out = Vec::with_capacity(windows.len());
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            for chunk in windows.chunks(SCORE_BATCH) {
                let refs: Vec<&WindowBatch> = chunk.iter().collect();
                let batch = BatchInput::from_windows(&refs)?;
                let stochastic = model.variant().is_stochastic() && options.samples > 0;
                let draws = if stochastic { options.samples } else { 1 };
                let mut sums: Vec<WindowErrors> = chunk
                    .iter()
                    .map(|w| vec![vec![None; w.len()]; w.vehicle_count()])
                    .collect();
                for _ in 0..draws {
                    let noise;
                    let sampling = if stochastic {
                        noise = Noise::sample(&mut rng, model.encoded_steps(batch.len()), batch.rows, model.config.latent_dim);
                        Sampling::Noise(&noise)
                    } else {
                        Sampling::Mean
                    };
                    let pass = model.forward(&batch, sampling, (0.0, 0.0))?;
                    let (errors, shift) = if model.variant().reconstruction_only() {
                        (&pass.recon_errors, 0)
                    } else {
                        (&pass.pred_errors, 1)
                    };
                    for (k, column) in errors.iter().enumerate() {
                        for (row, e) in column.iter().enumerate() {
                            if let Some(e) = e {
                                let (w, v) = batch.sources[row];
                                let slot = &mut sums[w][v][k + shift];
                                *slot = Some(slot.unwrap_or(0.0) + e / draws as f64);
                            }
                        }
                    }
                }
                out.extend(sums);
            }
            Ok(out)
        }
    }
}

/// Per-vehicle mean over overlapping windows and the number of windows
/// contributing, both indexed `[vehicle][observation step]`.
pub fn average_overlaps(
    windows: &[(usize, WindowErrors)],
    vehicles: usize,
    steps: usize,
) -> Result<(Vec<Vec<Option<f64>>>, Vec<Vec<usize>>)> {
    let mut sums = vec![vec![0.0; steps]; vehicles];
    let mut counts = vec![vec![0usize; steps]; vehicles];
    for (start, errors) in windows {
        if errors.len() != vehicles {
            return Err(Error::Parameter(format!(
                "window at {start} has {} vehicles, expected {vehicles}",
                errors.len()
            )));
        }
        for (v, row) in errors.iter().enumerate() {
            for (offset, e) in row.iter().enumerate() {
                let Some(e) = e else { continue };
                let k = start + offset;
                if k >= steps {
                    return Err(Error::Parameter(format!("window at {start} runs past step {steps}")));
                }
                sums[v][k] += e;
                counts[v][k] += 1;
            }
        }
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s.iter().zip(c).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect())
        .collect();
    Ok((means, counts))
}

/// Maximum over vehicles of their averaged errors; `None` if no vehicle is
/// scored.
pub fn anomaly_score(values: &[Option<f64>]) -> Option<f64> {
    values.iter().flatten().copied().reduce(f64::max)
}

/// Per-timestep anomaly scores of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub scene_id: String,
    pub anomaly_type: Option<String>,
    /// Ground truth per scene timestep.
    pub labels: Vec<Label>,
    /// `AS_t` per scene timestep; `None` where no window covers `t`.
    pub scores: Vec<Option<f64>>,
    /// `[vehicle][timestep]` averaged errors.
    pub vehicle_errors: Vec<Vec<Option<f64>>>,
    /// `[vehicle][timestep]` number of windows averaged.
    pub coverage: Vec<Vec<usize>>,
}

impl ScoreSeries {
    /// Scores with unscored leading timesteps filled by the earliest score,
    /// for plotting. Metrics never use the filled values.
    pub fn display_scores(&self) -> Vec<Option<f64>> {
        let first = self.scores.iter().flatten().next().copied();
        let mut seen = false;
        self.scores
            .iter()
            .map(|s| {
                seen |= s.is_some();
                if seen {
                    *s
                } else {
                    first
                }
            })
            .collect()
    }
}

/// Scores one scene. Observation step `k` is scene timestep `k + 1`.
pub fn score_scene(detector: &Detector, scene: &Scene, options: &ScoreOptions) -> Result<ScoreSeries> {
    let obs = build_observations(scene, options.neighbor_radius)?;
    let windows = make_windows(&obs, options.window_length, options.window_stride)?;
    let errors = window_pred_errors(detector, &windows, options)?;
    let indexed: Vec<(usize, WindowErrors)> = windows.iter().map(|w| w.start).zip(errors).collect();
    let (means, counts) = average_overlaps(&indexed, obs.vehicle_count(), obs.steps())?;

    let t_len = scene.len();
    let shift = |row: &[Option<f64>]| -> Vec<Option<f64>> {
        std::iter::once(None).chain(row.iter().copied()).take(t_len).collect()
    };
    let vehicle_errors: Vec<Vec<Option<f64>>> = means.iter().map(|r| shift(r)).collect();
    let coverage = counts
        .iter()
        .map(|r| std::iter::once(0).chain(r.iter().copied()).take(t_len).collect())
        .collect();
    let scores = (0..t_len)
        .map(|t| {
            let at: Vec<Option<f64>> = vehicle_errors.iter().map(|r| r[t]).collect();
            anomaly_score(&at)
        })
        .collect();
    Ok(ScoreSeries {
        scene_id: scene.scene_id.clone(),
        anomaly_type: scene.anomaly_type.clone(),
        labels: scene.labels.clone(),
        scores,
        vehicle_errors,
        coverage,
    })
}

/// Scores every scene on up to `jobs` threads; output order follows input.
pub fn score_scenes(detector: &Detector, scenes: &[Scene], options: &ScoreOptions, jobs: usize) -> Result<Vec<ScoreSeries>> {
    if jobs <= 1 {
        return scenes.iter().map(|s| score_scene(detector, s, options)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    pool.install(|| scenes.par_iter().map(|s| score_scene(detector, s, options)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_mean() {
        let w = vec![(0, vec![vec![Some(0.2), Some(0.5)]]), (1, vec![vec![Some(0.4), None]])];
        let (m, c) = average_overlaps(&w, 1, 3).unwrap();
        assert_eq!(m[0], vec![Some(0.2), Some(0.45), None]);
        assert_eq!(c[0], vec![1, 2, 0]);
        let single = vec![(0, vec![vec![None, Some(0.7)]])];
        assert_eq!(average_overlaps(&single, 1, 2).unwrap().0[0][1], Some(0.7));
        let both = vec![(0, vec![vec![Some(0.2)]]), (0, vec![vec![Some(0.4)]])];
        assert!((average_overlaps(&both, 1, 1).unwrap().0[0][0].unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn max_over_vehicles() {
        assert_eq!(anomaly_score(&[Some(0.3), Some(0.7)]), Some(0.7));
        assert_eq!(anomaly_score(&[Some(0.3)]), Some(0.3));
        assert_eq!(anomaly_score(&[Some(0.3), Some(0.7), Some(0.1)]), Some(0.7));
        assert_eq!(anomaly_score(&[None, Some(0.2)]), Some(0.2));
        assert_eq!(anomaly_score(&[None]), None);
    }

    #[test]
    fn display_fills_leading_gap() {
        let s = ScoreSeries {
            scene_id: "s".into(),
            anomaly_type: None,
            labels: vec![Label::Normal; 4],
            scores: vec![None, None, Some(1.0), Some(2.0)],
            vehicle_errors: vec![],
            coverage: vec![],
        };
        assert_eq!(s.display_scores(), vec![Some(1.0), Some(1.0), Some(1.0), Some(2.0)]);
    }
}
