//! Sliding-window minibatch training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{BatchInput, Model, Noise, Sampling};
use crate::nn::{clip_global_norm, Adam};
use crate::scene::{build_observations, make_windows, Scene, WindowBatch};

// Independent streams derived from the master seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4e4f_4953;

/// Current-state inputs and one-step-ahead targets of a window:
/// `(x[0..n-1], x[1..n])`.
pub fn split_window<T>(steps: &[T]) -> (&[T], &[T]) {
    match steps.len() {
        0 => (steps, steps),
        n => (&steps[..n - 1], &steps[1..]),
    }
}

/// Objective of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub pred: f64,
    pub recon: f64,
}

pub fn batch_loss(model: &Model, batch: &BatchInput, sampling: Sampling<'_>, betas: (f64, f64)) -> Result<LossParts> {
    let f = model.forward(batch, sampling, betas)?;
    Ok(LossParts {
        total: f.loss_value,
        pred: f.pred_loss,
        recon: f.recon_loss,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub pred_loss: f64,
    pub recon_loss: f64,
    pub batches: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write `best.json`, `last.json` and `train_log.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub last: Model,
    /// Parameters from the epoch with the lowest mean loss.
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

/// Training windows of `scenes`. Scenes with abnormal timesteps are rejected.
pub fn training_windows(scenes: &[Scene], config: &TrainConfig) -> Result<Vec<WindowBatch>> {
    let mut windows = Vec::new();
    for scene in scenes {
        if scene.has_abnormal() {
            return Err(Error::Parameter(format!(
                "training scene `{}` contains abnormal timesteps",
                scene.scene_id
            )));
        }
        let obs = build_observations(scene, config.neighbor_radius)?;
        windows.extend(make_windows(&obs, config.window_length, config.window_stride)?);
    }
    Ok(windows)
}

pub fn train(scenes: &[Scene], config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let windows = training_windows(scenes, config)?;
    train_windows(&windows, config, options)
}

pub fn train_windows(windows: &[WindowBatch], config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Parameter("no training windows".into()));
    }
    let mut model = Model::new(config.model(), config.seed)?;
    let mut optimizer = Adam::new(config.learning_rate, &model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ NOISE_STREAM);
    let betas = config.effective_betas();
    let j = config.latent_dim;

    let mut log_file = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut steps = 0;

    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if options.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let picked: Vec<&WindowBatch> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = BatchInput::from_windows(&picked)?;
            let noise = Noise::sample(&mut noise_rng, model.encoded_steps(batch.len()), batch.rows, j);
            let pass = model.forward(&batch, Sampling::Noise(&noise), betas)?;
            if pass.pred_count + pass.recon_count == 0 {
                continue;
            }
            if !pass.loss_value.is_finite() {
                let dump = dump_batch(options.out_dir.as_deref(), &picked);
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch}, step {steps}; windows {}{}",
                    pass.loss_value,
                    describe(&picked),
                    dump.map_or(String::new(), |p| format!("; dumped to {}", p.display()))
                )));
            }
            let mut grads = pass.tape.backward(pass.loss);
            let norm = clip_global_norm(&mut grads, config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm at epoch {epoch}, step {steps}; windows {}",
                    describe(&picked)
                )));
            }
            optimizer.update(&mut model.store, &grads);
            steps += 1;
            batches += 1;
            sums.0 += pass.loss_value;
            sums.1 += pass.pred_loss;
            sums.2 += pass.recon_loss;
        }
        if batches == 0 {
            break;
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            loss: sums.0 / n,
            pred_loss: sums.1 / n,
            recon_loss: sums.2 / n,
            batches,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.6} (pred {:.6}, recon {:.6})",
            record.loss,
            record.pred_loss,
            record.recon_loss
        );
        if let Some((file, path)) = &mut log_file {
            let line = serde_json::to_string(&record).map_err(|e| Error::json("encoding log record", e))?;
            writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        if record.loss < best.0 {
            best = (record.loss, model.clone(), epoch);
            if let Some(dir) = &options.out_dir {
                save_checkpoint(&model, Some(epoch), &dir.join("best.json"))?;
            }
        }
        log.push(record);
    }

    if let Some(dir) = &options.out_dir {
        save_checkpoint(&model, log.last().map(|r| r.epoch), &dir.join("last.json"))?;
        if log.is_empty() {
            save_checkpoint(&model, None, &dir.join("best.json"))?;
        }
    }
    Ok(TrainOutcome {
        last: model,
        best: best.1,
        best_epoch: best.2,
        log,
        steps,
    })
}

fn describe(windows: &[&WindowBatch]) -> String {
    let ids: Vec<String> = windows.iter().take(8).map(|w| format!("{}@{}", w.scene_id, w.start)).collect();
    let more = windows.len().saturating_sub(8);
    if more > 0 {
        format!("{} (+{more} more)", ids.join(", "))
    } else {
        ids.join(", ")
    }
}

#[derive(Serialize)]
struct DumpStep {
    vehicle: usize,
    step: usize,
    displacement: Option<[f64; 2]>,
}

#[derive(Serialize)]
struct DumpWindow<'a> {
    scene_id: &'a str,
    start: usize,
    steps: Vec<DumpStep>,
}

fn dump_batch(dir: Option<&Path>, windows: &[&WindowBatch]) -> Option<PathBuf> {
    let path = dir?.join("nonfinite_batch.json");
    let dump: Vec<DumpWindow> = windows
        .iter()
        .map(|w| DumpWindow {
            scene_id: &w.scene_id,
            start: w.start,
            steps: w
                .observations
                .iter()
                .enumerate()
                .flat_map(|(v, seq)| {
                    seq.iter().enumerate().map(move |(k, o)| DumpStep {
                        vehicle: v,
                        step: k,
                        displacement: o.as_ref().map(|o| o.displacement),
                    })
                })
                .collect(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&dump).ok()?;
    fs::write(&path, json).ok()?;
    Some(path)
}
