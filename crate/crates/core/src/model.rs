//! Full detector: attention front end, recurrent encoder, latent propagation
//! and decoder, batched over windows.
//!
//! Every `(window, vehicle)` pair becomes one row. Rows never mix except
//! through unmasked attention slots, so an absent or out-of-range vehicle
//! cannot affect anyone else's output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::AttentionParams;
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::latent::{DecoderParams, EncoderParams, KoopmanParams};
use crate::nn::{Mlp, ParamStore};
use crate::scene::WindowBatch;
use crate::tape::{Tape, Tensor, Var};

/// One timestep of a batch, laid out for the tape.
#[derive(Debug, Clone)]
pub struct StepInput {
    /// `rows x 2` displacements; zeros where absent.
    pub displacement: Tensor,
    pub present: Vec<bool>,
    /// `(rows * neighbor_slots) x 2` relative positions of other vehicles.
    pub neighbors: Tensor,
    pub neighbor_mask: Vec<bool>,
    /// `(rows * 3) x 2` lane-node offsets.
    pub lanes: Tensor,
    pub lane_mask: Vec<bool>,
}

/// Windows of equal length stacked into rows.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub rows: usize,
    pub neighbor_slots: usize,
    pub steps: Vec<StepInput>,
    /// `(window index, vehicle index)` for each row.
    pub sources: Vec<(usize, usize)>,
}

impl BatchInput {
    /// Neighbor slot `s` of vehicle `v` holds vehicle `s` if `s < v`,
    /// otherwise vehicle `s + 1`.
    pub fn from_windows(windows: &[&WindowBatch]) -> Result<Self> {
        let len = windows.first().map_or(0, |w| w.len());
        if windows.iter().any(|w| w.len() != len) {
            return Err(Error::Parameter("windows in a batch must share a length".into()));
        }
        let sources: Vec<(usize, usize)> = windows
            .iter()
            .enumerate()
            .flat_map(|(w, win)| (0..win.vehicle_count()).map(move |v| (w, v)))
            .collect();
        let rows = sources.len();
        let max_vehicles = windows.iter().map(|w| w.vehicle_count()).max().unwrap_or(0);
        let slots = max_vehicles.saturating_sub(1).max(1);

        let mut steps = Vec::with_capacity(len);
        for k in 0..len {
            let mut step = StepInput {
                displacement: Tensor::zeros(rows, 2),
                present: vec![false; rows],
                neighbors: Tensor::zeros(rows * slots, 2),
                neighbor_mask: vec![false; rows * slots],
                lanes: Tensor::zeros(rows * 3, 2),
                lane_mask: vec![false; rows * 3],
            };
            for (r, &(w, v)) in sources.iter().enumerate() {
                let Some(obs) = &windows[w].observations[v][k] else {
                    continue;
                };
                step.present[r] = true;
                step.displacement.row_mut(r).copy_from_slice(&obs.displacement);
                for n in &obs.neighbors {
                    let slot = if n.vehicle < v { n.vehicle } else { n.vehicle - 1 };
                    let idx = r * slots + slot;
                    step.neighbors.row_mut(idx).copy_from_slice(&n.displacement);
                    step.neighbor_mask[idx] = true;
                }
                for l in 0..3 {
                    step.lanes.row_mut(r * 3 + l).copy_from_slice(&obs.lanes[l]);
                    step.lane_mask[r * 3 + l] = obs.lane_mask[l];
                }
            }
            steps.push(step);
        }
        Ok(BatchInput {
            rows,
            neighbor_slots: slots,
            steps,
            sources,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Standard-normal draws for the reparameterized samples, one `rows x j`
/// tensor per encoded step and path.
#[derive(Debug, Clone)]
pub struct Noise {
    pub current: Vec<Tensor>,
    pub propagated: Vec<Tensor>,
}

impl Noise {
    pub fn sample<R: Rng>(rng: &mut R, steps: usize, rows: usize, latent_dim: usize) -> Self {
        let mut draw = || {
            Tensor::from_vec(
                rows,
                latent_dim,
                (0..rows * latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
            )
        };
        let current = (0..steps).map(|_| draw()).collect();
        let propagated = (0..steps).map(|_| draw()).collect();
        Noise { current, propagated }
    }
}

/// One-step latent propagation.
#[derive(Debug, Clone, PartialEq)]
pub enum Propagator {
    /// Lane-conditioned tridiagonal operators.
    Koopman(KoopmanParams),
    /// Residual perceptron on the mean only, for the ablations.
    Perceptron(Mlp),
}

/// Parameter layout of a model; indices point into its [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub vehicle_attention: Option<AttentionParams>,
    pub lane_attention: Option<AttentionParams>,
    pub encoder: EncoderParams,
    pub propagator: Propagator,
    pub decoder: DecoderParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

/// How latent samples are drawn during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Sampling<'a> {
    /// `z = mu`.
    Mean,
    /// `z = mu + eps * sigma` with the given draws.
    Noise(&'a Noise),
}

/// Tape handles for one encoded step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub mean: Var,
    pub deviation: Option<Var>,
    pub propagated_mean: Option<Var>,
    pub propagated_deviation: Option<Var>,
    pub mean_operator: Option<Var>,
    pub deviation_operator: Option<Var>,
    pub current_sample: Var,
    pub propagated_sample: Option<Var>,
    pub reconstruction: Var,
    pub prediction: Option<Var>,
}

/// Result of a forward pass over a batch.
#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    pub loss: Var,
    pub loss_value: f64,
    pub pred_loss: f64,
    pub recon_loss: f64,
    pub steps: Vec<StepVars>,
    /// `pred_errors[k][row]`: error of the prediction for step `k + 1`,
    /// `None` where the target or source step is absent.
    pub pred_errors: Vec<Vec<Option<f64>>>,
    /// `recon_errors[k][row]`: reconstruction error at step `k`.
    pub recon_errors: Vec<Vec<Option<f64>>>,
    /// Unmasked prediction and reconstruction terms.
    pub pred_count: usize,
    pub recon_count: usize,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = config.variant;
        let d = config.attention_size;
        let vehicle_attention = if v.uses_vehicle_attention() {
            Some(AttentionParams::new(&mut store, "vehicle_attention", 2, d, config.heads, &mut rng)?)
        } else {
            None
        };
        let lane_attention = if v.uses_lanes() {
            Some(AttentionParams::new(&mut store, "lane_attention", 2, d, config.heads, &mut rng)?)
        } else {
            None
        };
        let encoder_input = if v.uses_vehicle_attention() { d + 2 } else { 2 };
        let encoder = EncoderParams::new(&mut store, encoder_input, &config, &mut rng);
        let propagator = if v.uses_lanes() {
            Propagator::Koopman(KoopmanParams::new(&mut store, &config, &mut rng))
        } else {
            let j = config.latent_dim;
            Propagator::Perceptron(Mlp::with_output_gain(
                &mut store,
                "propagator",
                &[j, config.mlp_hidden, j],
                0.1,
                &mut rng,
            ))
        };
        let decoder = DecoderParams::new(&mut store, &config, &mut rng);
        Ok(Model {
            config,
            store,
            layout: Layout {
                vehicle_attention,
                lane_attention,
                encoder,
                propagator,
                decoder,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Steps fed to the encoder for a window of `len` steps: all of them
    /// for reconstruction-only models, otherwise all but the last.
    pub fn encoded_steps(&self, len: usize) -> usize {
        if self.variant().reconstruction_only() {
            len
        } else {
            len.saturating_sub(1)
        }
    }

    /// Runs the model over `batch` and assembles the objective.
    ///
    /// Prediction and reconstruction terms are each averaged over their
    /// unmasked vehicle-steps; `betas` weight the propagated and current KL
    /// terms respectively.
    pub fn forward(&self, batch: &BatchInput, sampling: Sampling<'_>, betas: (f64, f64)) -> Result<Forward> {
        if batch.len() < 2 {
            return Err(Error::Parameter("a window needs at least two steps".into()));
        }
        let (beta_pred, beta_recon) = betas;
        let store = &self.store;
        let layout = &self.layout;
        let rows = batch.rows;
        let encoded = self.encoded_steps(batch.len());
        let predicts = !self.variant().reconstruction_only();
        if let Sampling::Noise(noise) = sampling {
            if noise.current.len() < encoded || noise.propagated.len() < encoded {
                return Err(Error::Parameter("noise stream shorter than the window".into()));
            }
        }

        let mut tape = Tape::new();
        let mut state = layout.encoder.cell.initial_state(&mut tape, rows);
        let mut steps = Vec::with_capacity(encoded);
        let mut pred_terms: Vec<(Var, Vec<f64>)> = Vec::new();
        let mut recon_terms: Vec<(Var, Vec<f64>)> = Vec::new();
        let mut pred_masks = Vec::new();
        let mut recon_masks = Vec::new();

        for k in 0..encoded {
            let step = &batch.steps[k];
            let x = tape.input(step.displacement.clone());
            let enc_input = match &layout.vehicle_attention {
                Some(att) => {
                    let others = tape.input(step.neighbors.clone());
                    let p = att.forward(&mut tape, store, x, others, &step.neighbor_mask, batch.neighbor_slots);
                    tape.concat(&[p, x])
                }
                None => x,
            };
            let enc = layout.encoder.step(&mut tape, store, enc_input, state, &step.present);
            state = enc.state;

            let current_sample = sample(&mut tape, enc.mean, enc.deviation, sampling, |n| &n.current[k]);
            let reconstruction = layout.decoder.forward(&mut tape, store, current_sample);
            let recon_mask = step.present.clone();
            let diff = tape.sub(reconstruction, x);
            let recon_err = tape.row_norm(diff);
            recon_terms.push((recon_err, Vec::new()));
            if let Some(dev) = enc.deviation {
                if beta_recon != 0.0 {
                    let kl = tape.kl_std_normal(enc.mean, dev);
                    recon_terms.push((kl, vec![beta_recon]));
                }
            }
            recon_masks.push(recon_mask);

            let mut vars = StepVars {
                mean: enc.mean,
                deviation: enc.deviation,
                propagated_mean: None,
                propagated_deviation: None,
                mean_operator: None,
                deviation_operator: None,
                current_sample,
                propagated_sample: None,
                reconstruction,
                prediction: None,
            };

            if predicts {
                let next = &batch.steps[k + 1];
                let pred_mask: Vec<bool> = step.present.iter().zip(&next.present).map(|(a, b)| *a && *b).collect();
                let (mean, deviation) = match &layout.propagator {
                    Propagator::Koopman(koopman) => {
                        let att = layout.lane_attention.as_ref().expect("lane variants carry lane attention");
                        let lanes = tape.input(step.lanes.clone());
                        let p_lv = att.forward(&mut tape, store, x, lanes, &step.lane_mask, 3);
                        let out = koopman.propagate(&mut tape, store, enc.mean, enc.deviation, p_lv);
                        vars.mean_operator = Some(out.mean_operator);
                        vars.deviation_operator = out.deviation_operator;
                        (out.mean, out.deviation)
                    }
                    Propagator::Perceptron(net) => {
                        let delta = net.forward(&mut tape, store, enc.mean);
                        (tape.add(enc.mean, delta), None)
                    }
                };
                let z = sample(&mut tape, mean, deviation, sampling, |n| &n.propagated[k]);
                let prediction = layout.decoder.forward(&mut tape, store, z);
                let target = tape.input(next.displacement.clone());
                let diff = tape.sub(prediction, target);
                let err = tape.row_norm(diff);
                pred_terms.push((err, Vec::new()));
                if let Some(dev) = deviation {
                    if beta_pred != 0.0 {
                        let kl = tape.kl_std_normal(mean, dev);
                        pred_terms.push((kl, vec![beta_pred]));
                    }
                }
                pred_masks.push(pred_mask);
                vars.propagated_mean = Some(mean);
                vars.propagated_deviation = deviation;
                vars.propagated_sample = Some(z);
                vars.prediction = Some(prediction);
            }
            steps.push(vars);
        }

        let pred_count: usize = pred_masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        let recon_count: usize = recon_masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();

        let (pred_var, pred_errors) = reduce(&mut tape, &pred_terms, &pred_masks, pred_count);
        let (recon_var, recon_errors) = reduce(&mut tape, &recon_terms, &recon_masks, recon_count);
        let mut parts = Vec::new();
        parts.extend(pred_var);
        parts.extend(recon_var);
        let loss = if parts.is_empty() {
            tape.input(Tensor::scalar(0.0))
        } else {
            tape.sum_scalars(&parts)
        };
        let value_of = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        let pred_loss = value_of(&tape, pred_var);
        let recon_loss = value_of(&tape, recon_var);
        let loss_value = tape.value(loss).data()[0];
        Ok(Forward {
            tape,
            loss,
            loss_value,
            pred_loss,
            recon_loss,
            steps,
            pred_errors,
            recon_errors,
            pred_count,
            recon_count,
        })
    }

    /// Named parameter values, in registration order.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.store.iter()
    }
}

fn sample(
    tape: &mut Tape,
    mean: Var,
    deviation: Option<Var>,
    sampling: Sampling<'_>,
    pick: impl Fn(&Noise) -> &Tensor,
) -> Var {
    match (sampling, deviation) {
        (Sampling::Noise(noise), Some(dev)) => {
            let eps = tape.input(pick(noise).clone());
            let spread = tape.mul(eps, dev);
            tape.add(mean, spread)
        }
        _ => mean,
    }
}

/// Sums per-step `n x 1` terms under the step masks, divided by `count`.
/// The first term of each step is the error column; its values are returned
/// per row.
fn reduce(
    tape: &mut Tape,
    terms: &[(Var, Vec<f64>)],
    masks: &[Vec<bool>],
    count: usize,
) -> (Option<Var>, Vec<Vec<Option<f64>>>) {
    let mut errors = Vec::with_capacity(masks.len());
    let mut scalars = Vec::with_capacity(terms.len());
    let mut step = 0;
    for (i, (var, beta)) in terms.iter().enumerate() {
        // Error terms carry no beta and open a new step.
        let is_error = beta.is_empty();
        if is_error && i > 0 {
            step += 1;
        }
        let mask = &masks[step];
        if is_error {
            let col = tape.value(*var);
            errors.push(mask.iter().enumerate().map(|(r, &m)| m.then(|| col.get(r, 0))).collect());
        }
        if count == 0 {
            continue;
        }
        let w = if is_error { 1.0 } else { beta[0] } / count as f64;
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        scalars.push(tape.weighted_sum(*var, &weights));
    }
    if count == 0 {
        log::warn!("batch has no unmasked terms; contributing zero loss");
        return (None, errors);
    }
    (Some(tape.sum_scalars(&scalars)), errors)
}
