#![allow(dead_code)]

use saber_core::scene::{build_observations, make_windows};
use saber_core::{Label, MapSpec, ModelConfig, Scene, Track, TrainConfig, Variant, WindowBatch};

/// Small architecture for fast tests.
pub fn small_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        attention_size: 8,
        heads: 2,
        mlp_hidden: 8,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

pub fn small_model_config(variant: Variant) -> ModelConfig {
    small_config(variant).model()
}

/// Vehicles moving at constant velocity; `speeds` and lane `y` per vehicle.
/// `1.25` m steps keep every coordinate exactly representable.
pub fn constant_velocity_scene(id: &str, len: usize, starts: &[(f64, f64, f64)]) -> Scene {
    Scene {
        scene_id: id.into(),
        timestep_dt: 0.1,
        anomaly_type: None,
        map: MapSpec::default(),
        labels: vec![Label::Normal; len],
        tracks: starts
            .iter()
            .enumerate()
            .map(|(i, &(x0, y, step))| Track {
                vehicle_id: i as u32,
                positions: (0..len).map(|t| Some([x0 + step * t as f64, y])).collect(),
            })
            .collect(),
    }
}

pub fn windows_of(scene: &Scene, config: &TrainConfig) -> Vec<WindowBatch> {
    let obs = build_observations(scene, config.neighbor_radius).unwrap();
    make_windows(&obs, config.window_length, config.window_stride).unwrap()
}

/// AUROC as the fraction of concordant (positive, negative) pairs, ties
/// counting one half.
pub fn concordance_auroc(scores: &[f64], positives: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (i, &p) in positives.iter().enumerate() {
        if !p {
            continue;
        }
        for (k, &n) in positives.iter().enumerate() {
            if n {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[k] {
                total += 1.0;
            } else if scores[i] == scores[k] {
                total += 0.5;
            }
        }
    }
    total / pairs
}

/// Average precision by enumerating every distinct threshold from the top:
/// the sum of precision times recall gained at each threshold.
pub fn exhaustive_average_precision(scores: &[f64], positives: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let total = positives.iter().filter(|&&p| p).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let tp = scores.iter().zip(positives).filter(|(&s, &p)| s >= t && p).count() as f64;
        let fp = scores.iter().zip(positives).filter(|(&s, &p)| s >= t && !p).count() as f64;
        let recall = tp / total;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// Smallest FPR over all thresholds reaching the target TPR.
pub fn exhaustive_fpr_at_tpr(scores: &[f64], positives: &[bool], target: f64) -> f64 {
    let p = positives.iter().filter(|&&x| x).count() as f64;
    let n = positives.len() as f64 - p;
    let mut best = 1.0f64;
    for &t in scores {
        let tp = scores.iter().zip(positives).filter(|(&s, &l)| s >= t && l).count() as f64;
        let fp = scores.iter().zip(positives).filter(|(&s, &l)| s >= t && !l).count() as f64;
        if tp / p >= target {
            best = best.min(fp / n);
        }
    }
    best
}

/// Per-vehicle mean error at each observation step by re-enumerating every
/// window covering it, in window order.
pub fn brute_force_overlaps(
    windows: &[(usize, Vec<Vec<Option<f64>>>)],
    vehicles: usize,
    steps: usize,
) -> Vec<Vec<Option<f64>>> {
    (0..vehicles)
        .map(|v| {
            (0..steps)
                .map(|k| {
                    let covering: Vec<f64> = windows
                        .iter()
                        .filter(|(start, e)| *start <= k && k < start + e[v].len())
                        .filter_map(|(start, e)| e[v][k - start])
                        .collect();
                    if covering.is_empty() {
                        None
                    } else {
                        let mut sum = 0.0;
                        for e in &covering {
                            sum += e;
                        }
                        Some(sum / covering.len() as f64)
                    }
                })
                .collect()
        })
        .collect()
}

/// Two nearby vehicles over five timesteps with curving paths, giving one
/// window of four observation steps.
pub fn gradient_scene() -> Scene {
    let a = (0..5).map(|t| {
        let t = t as f64;
        Some([40.0 + 1.3 * t + 0.05 * t * t, -5.25 + 0.1 * t.sin()])
    });
    let b = (0..5).map(|t| {
        let t = t as f64;
        Some([52.0 + 1.1 * t - 0.03 * t * t, -1.75 - 0.2 * t])
    });
    Scene {
        scene_id: "grad".into(),
        timestep_dt: 0.1,
        anomaly_type: None,
        map: MapSpec::default(),
        labels: vec![Label::Normal; 5],
        tracks: vec![
            Track { vehicle_id: 0, positions: a.collect() },
            Track { vehicle_id: 1, positions: b.collect() },
        ],
    }
}

/// Relative error between analytic and central-difference gradients of the
/// full loss, per parameter tensor: `|g - n| / max(|g|, |n|, 1e-8)` over the
/// tensor as a vector.
pub fn gradient_errors(variant: Variant, seed: u64) -> Vec<(String, f64)> {
    use rand::SeedableRng;
    use saber_core::{BatchInput, Model, Noise, Sampling};

    let config = TrainConfig {
        variant,
        latent_dim: 2,
        attention_size: 8,
        heads: 2,
        mlp_hidden: 8,
        window_length: 4,
        ..TrainConfig::default()
    };
    let windows = windows_of(&gradient_scene(), &config);
    assert_eq!(windows.len(), 1);
    let batch = BatchInput::from_windows(&[&windows[0]]).unwrap();
    let mut model = Model::new(config.model(), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Noise::sample(&mut rng, model.encoded_steps(batch.len()), batch.rows, 2);
    let betas = (0.3, 0.7);

    let pass = model.forward(&batch, Sampling::Noise(&noise), betas).unwrap();
    let grads = pass.tape.backward(pass.loss);
    let h = 1e-6;
    let mut out = Vec::new();
    for id in 0..model.store.len() {
        let name = model.store.name(id).to_string();
        let size = model.store.get(id).data().len();
        let analytic: Vec<f64> = match grads.get(id).and_then(|g| g.as_ref()) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; size],
        };
        let mut numeric = Vec::with_capacity(size);
        for i in 0..size {
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + h;
            let up = model.forward(&batch, Sampling::Noise(&noise), betas).unwrap().loss_value;
            model.store.get_mut(id).data_mut()[i] = orig - h;
            let down = model.forward(&batch, Sampling::Noise(&noise), betas).unwrap().loss_value;
            model.store.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let an: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        out.push((name, diff / an.max(nn).max(1e-8)));
    }
    out
}
