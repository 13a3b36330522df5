//! Latent dynamics: recurrent encoder, Koopman propagation, sampling and the
//! shared decoder.
//!
//! The encoder plays the role of the lifting map `g`: it turns a vehicle's
//! history into a Gaussian latent state `N(mu_t, sigma_t)`. Instead of one
//! global linear operator `K` with `K g(x_t) = g(x_{t+1})`, auxiliary nets
//! predict a tridiagonal operator per vehicle and timestep from the current
//! latent parameters and the lane embedding, applied in residual form:
//!
//! ```text
//! mu_{t+1}    = K_mu    mu_t    + mu_t
//! sigma_{t+1} = |K_sigma sigma_t + sigma_t|   (clamped to [1e-6, 1e6])
//! ```
//!
//! The decoder stands in for `g^-1`, mapping latent samples back to
//! displacements; the same weights serve reconstruction and prediction.

use rand::Rng;

use crate::config::{CellKind, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore};
use crate::scene::Point;
use crate::tape::{Tape, Tensor, Var};

pub const SIGMA_MIN: f64 = 1e-6;
pub const SIGMA_MAX: f64 = 1e6;

/// Number of raw entries defining a `j x j` tridiagonal matrix.
pub fn tridiagonal_len(j: usize) -> usize {
    3 * j - 2
}

/// Materializes a tridiagonal matrix from `[diag (j), super (j-1), sub (j-1)]`.
pub fn build_tridiagonal(raw: &[f64]) -> Result<Tensor> {
    if raw.is_empty() || (raw.len() + 2) % 3 != 0 {
        return Err(Error::Parameter(format!(
            "tridiagonal matrix needs 3j-2 entries, got {}",
            raw.len()
        )));
    }
    let j = (raw.len() + 2) / 3;
    let mut m = Tensor::zeros(j, j);
    for i in 0..j {
        m.set(i, i, raw[i]);
    }
    for i in 0..j - 1 {
        m.set(i, i + 1, raw[j + i]);
        m.set(i + 1, i, raw[2 * j - 1 + i]);
    }
    Ok(m)
}

/// KL divergence of `N(mu, sigma^2)` from `N(0, 1)`, summed over dimensions.
pub fn kl_std_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum()
}

/// Reparameterized sample `mu + eps * sigma`.
pub fn sample_latent(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .zip(eps)
        .map(|((m, s), e)| m + e * s)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub input_weight: usize,
    pub hidden_weight: usize,
    pub input_bias: usize,
    pub hidden_bias: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_weight: usize,
    pub hidden_weight: usize,
    pub bias: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecurrentCell {
    Gru(GruCell),
    Lstm(LstmCell),
}

/// Hidden (and, for LSTM, cell) state of a batch of tracks.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub hidden: Var,
    pub cell: Option<Var>,
}

impl RecurrentCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let init = |store: &mut ParamStore, n: &str, rows: usize, cols: usize, rng: &mut R| {
            store.add(format!("{name}.{n}"), crate::nn::fan_in_uniform(rng, hidden, rows, cols, 1.0))
        };
        match kind {
            CellKind::Gru => RecurrentCell::Gru(GruCell {
                input_weight: init(store, "input_weight", input, 3 * hidden, rng),
                hidden_weight: init(store, "hidden_weight", hidden, 3 * hidden, rng),
                input_bias: init(store, "input_bias", 1, 3 * hidden, rng),
                hidden_bias: init(store, "hidden_bias", 1, 3 * hidden, rng),
                hidden,
            }),
            CellKind::Lstm => RecurrentCell::Lstm(LstmCell {
                input_weight: init(store, "input_weight", input, 4 * hidden, rng),
                hidden_weight: init(store, "hidden_weight", hidden, 4 * hidden, rng),
                bias: init(store, "bias", 1, 4 * hidden, rng),
                hidden,
            }),
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            RecurrentCell::Gru(c) => c.hidden,
            RecurrentCell::Lstm(c) => c.hidden,
        }
    }

    pub fn initial_state(&self, tape: &mut Tape, rows: usize) -> RecurrentState {
        let h = self.hidden_size();
        RecurrentState {
            hidden: tape.input(Tensor::zeros(rows, h)),
            cell: matches!(self, RecurrentCell::Lstm(_)).then(|| tape.input(Tensor::zeros(rows, h))),
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: RecurrentState) -> RecurrentState {
        match self {
            RecurrentCell::Gru(c) => {
                let h = c.hidden;
                let wi = store.var(tape, c.input_weight);
                let wh = store.var(tape, c.hidden_weight);
                let bi = store.var(tape, c.input_bias);
                let bh = store.var(tape, c.hidden_bias);
                let xi = tape.matmul(x, wi);
                let gi = tape.add_bias(xi, bi);
                let hh = tape.matmul(state.hidden, wh);
                let gh = tape.add_bias(hh, bh);
                let (gi_r, gi_z, gi_n) = (tape.slice_cols(gi, 0, h), tape.slice_cols(gi, h, h), tape.slice_cols(gi, 2 * h, h));
                let (gh_r, gh_z, gh_n) = (tape.slice_cols(gh, 0, h), tape.slice_cols(gh, h, h), tape.slice_cols(gh, 2 * h, h));
                let r_pre = tape.add(gi_r, gh_r);
                let reset = tape.sigmoid(r_pre);
                let z_pre = tape.add(gi_z, gh_z);
                let update = tape.sigmoid(z_pre);
                let gated = tape.mul(reset, gh_n);
                let n_pre = tape.add(gi_n, gated);
                let candidate = tape.tanh(n_pre);
                // h' = n + z * (h - n)
                let diff = tape.sub(state.hidden, candidate);
                let keep = tape.mul(update, diff);
                RecurrentState {
                    hidden: tape.add(candidate, keep),
                    cell: None,
                }
            }
            RecurrentCell::Lstm(c) => {
                let h = c.hidden;
                let wi = store.var(tape, c.input_weight);
                let wh = store.var(tape, c.hidden_weight);
                let b = store.var(tape, c.bias);
                let xi = tape.matmul(x, wi);
                let hh = tape.matmul(state.hidden, wh);
                let sum = tape.add(xi, hh);
                let gates = tape.add_bias(sum, b);
                let slice = |tape: &mut Tape, k: usize| tape.slice_cols(gates, k * h, h);
                let (i_pre, f_pre, g_pre, o_pre) = (slice(tape, 0), slice(tape, 1), slice(tape, 2), slice(tape, 3));
                let input = tape.sigmoid(i_pre);
                let forget = tape.sigmoid(f_pre);
                let cand = tape.tanh(g_pre);
                let output = tape.sigmoid(o_pre);
                let prev_cell = state.cell.expect("lstm state carries a cell");
                let kept = tape.mul(forget, prev_cell);
                let added = tape.mul(input, cand);
                let cell = tape.add(kept, added);
                let squashed = tape.tanh(cell);
                RecurrentState {
                    hidden: tape.mul(output, squashed),
                    cell: Some(cell),
                }
            }
        }
    }

    /// Takes `next` for rows where `present`, otherwise carries `prev`.
    pub fn carry(tape: &mut Tape, next: RecurrentState, prev: RecurrentState, present: &[bool]) -> RecurrentState {
        if present.iter().all(|&p| p) {
            return next;
        }
        RecurrentState {
            hidden: tape.select_rows(next.hidden, prev.hidden, present),
            cell: match (next.cell, prev.cell) {
                (Some(n), Some(p)) => Some(tape.select_rows(n, p, present)),
                _ => None,
            },
        }
    }
}

/// `f_e`, the recurrent cell, and the mean/deviation heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embed: Linear,
    pub cell: RecurrentCell,
    pub mean: Mlp,
    /// Present only for stochastic variants.
    pub deviation: Option<Mlp>,
    pub latent_dim: usize,
}

/// Per-step output of the encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub state: RecurrentState,
    pub mean: Var,
    pub deviation: Option<Var>,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, input: usize, config: &ModelConfig, rng: &mut R) -> Self {
        let hidden = config.hidden_size;
        let j = config.latent_dim;
        let embed = Linear::new(store, "encoder.embed", input, hidden, rng);
        let cell = RecurrentCell::new(store, "encoder.cell", config.cell, hidden, hidden, rng);
        let mean = Mlp::new(store, "encoder.mean", &[hidden, config.mlp_hidden, j], rng);
        let deviation = config.variant.is_stochastic().then(|| {
            let head = Mlp::with_output_gain(store, "encoder.deviation", &[hidden, config.mlp_hidden, j], 0.1, rng);
            // Start near sigma = exp(0) = 1.
            store.get_mut(head.output_layer().bias).data_mut().fill(0.0);
            head
        });
        EncoderParams {
            embed,
            cell,
            mean,
            deviation,
            latent_dim: j,
        }
    }

    /// One encoder step over a batch: embed, recur, and read out the latent
    /// Gaussian. Rows not `present` keep their previous recurrent state.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        prev: RecurrentState,
        present: &[bool],
    ) -> EncodedVars {
        let e = self.embed.forward(tape, store, input);
        let e = tape.tanh(e);
        let next = self.cell.step(tape, store, e, prev);
        let state = RecurrentCell::carry(tape, next, prev, present);
        let mean = self.mean.forward(tape, store, state.hidden);
        let deviation = self.deviation.as_ref().map(|head| {
            let raw = head.forward(tape, store, state.hidden);
            let s = tape.exp(raw);
            tape.clamp(s, SIGMA_MIN, SIGMA_MAX)
        });
        EncodedVars { state, mean, deviation }
    }
}

/// Encoder output for one timestep of a single track.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStep {
    pub hidden: Vec<f64>,
    pub mean: Vec<f64>,
    /// Ones for deterministic encoders.
    pub deviation: Vec<f64>,
}

/// Runs the encoder over one track's embeddings, starting from `h_0 = 0`.
pub fn encode_sequence(embeddings: &[Vec<f64>], encoder: &EncoderParams, store: &ParamStore) -> Result<Vec<EncodedStep>> {
    let mut tape = Tape::new();
    let mut state = encoder.cell.initial_state(&mut tape, 1);
    let mut out = Vec::with_capacity(embeddings.len());
    for (t, emb) in embeddings.iter().enumerate() {
        if let Some(bad) = emb.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding at timestep {t}, component {bad}")));
        }
        let x = tape.input(Tensor::from_vec(1, emb.len(), emb.clone()));
        let enc = encoder.step(&mut tape, store, x, state, &[true]);
        state = enc.state;
        out.push(EncodedStep {
            hidden: tape.value(enc.state.hidden).data().to_vec(),
            mean: tape.value(enc.mean).data().to_vec(),
            deviation: enc
                .deviation
                .map_or_else(|| vec![1.0; encoder.latent_dim], |d| tape.value(d).data().to_vec()),
        });
    }
    Ok(out)
}

/// Auxiliary nets predicting the tridiagonal Koopman operators.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanParams {
    pub mean_aux: Mlp,
    /// Absent for deterministic variants.
    pub deviation_aux: Option<Mlp>,
    pub latent_dim: usize,
}

/// Propagated latent parameters plus the raw operator entries that produced
/// them.
#[derive(Debug, Clone, Copy)]
pub struct PropagatedVars {
    pub mean: Var,
    pub deviation: Option<Var>,
    pub mean_operator: Var,
    pub deviation_operator: Option<Var>,
}

impl KoopmanParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        let j = config.latent_dim;
        let dims = [j + config.attention_size, config.mlp_hidden, tridiagonal_len(j)];
        KoopmanParams {
            mean_aux: Mlp::with_output_gain(store, "koopman.mean_aux", &dims, 0.1, rng),
            deviation_aux: config
                .variant
                .is_stochastic()
                .then(|| Mlp::with_output_gain(store, "koopman.deviation_aux", &dims, 0.1, rng)),
            latent_dim: j,
        }
    }

    pub fn propagate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mean: Var,
        deviation: Option<Var>,
        lane_embedding: Var,
    ) -> PropagatedVars {
        let mean_in = tape.concat(&[mean, lane_embedding]);
        let mean_operator = self.mean_aux.forward(tape, store, mean_in);
        let moved = tape.tridiagonal_matvec(mean_operator, mean);
        let next_mean = tape.add(moved, mean);

        let (next_dev, dev_op) = match (&self.deviation_aux, deviation) {
            (Some(aux), Some(dev)) => {
                let dev_in = tape.concat(&[dev, lane_embedding]);
                let op = aux.forward(tape, store, dev_in);
                let moved = tape.tridiagonal_matvec(op, dev);
                let sum = tape.add(moved, dev);
                let pos = tape.abs(sum);
                (Some(tape.clamp(pos, SIGMA_MIN, SIGMA_MAX)), Some(op))
            }
            _ => (None, None),
        };
        PropagatedVars {
            mean: next_mean,
            deviation: next_dev,
            mean_operator,
            deviation_operator: dev_op,
        }
    }
}

/// Single-vehicle Koopman step on plain vectors.
pub fn koopman_propagate(
    mean: &[f64],
    deviation: &[f64],
    lane_embedding: &[f64],
    params: &KoopmanParams,
    store: &ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if deviation.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Parameter("deviation must be positive".into()));
    }
    let mut tape = Tape::new();
    let m = tape.input(Tensor::from_vec(1, mean.len(), mean.to_vec()));
    let s = tape.input(Tensor::from_vec(1, deviation.len(), deviation.to_vec()));
    let p = tape.input(Tensor::from_vec(1, lane_embedding.len(), lane_embedding.to_vec()));
    let out = params.propagate(&mut tape, store, m, Some(s), p);
    let next_mean = tape.value(out.mean).data().to_vec();
    let next_dev = out
        .deviation
        .map_or_else(|| deviation.to_vec(), |d| tape.value(d).data().to_vec());
    if next_mean.iter().chain(&next_dev).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("koopman propagation".into()));
    }
    Ok((next_mean, next_dev))
}

/// Shared decoder from latent samples to displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub net: Mlp,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        DecoderParams {
            net: Mlp::new(
                store,
                "decoder",
                &[config.latent_dim, config.mlp_hidden, config.mlp_hidden, 2],
                rng,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        self.net.forward(tape, store, z)
    }
}

pub fn decode(z: &[f64], decoder: &DecoderParams, store: &ParamStore) -> Point {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(1, z.len(), z.to_vec()));
    let y = decoder.forward(&mut tape, store, x);
    let v = tape.value(y);
    [v.get(0, 0), v.get(0, 1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{TrainConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(j: usize) -> ModelConfig {
        TrainConfig {
            latent_dim: j,
            attention_size: 8,
            heads: 2,
            mlp_hidden: 8,
            ..TrainConfig::default()
        }
        .model()
    }

    fn zero_all(store: &mut ParamStore) {
        for id in 0..store.len() {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn tridiagonal_layout() {
        let m = build_tridiagonal(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, Tensor::from_rows(&[&[1.0, 3.0], &[4.0, 2.0]]));
        assert_eq!(build_tridiagonal(&[5.0]).unwrap(), Tensor::from_rows(&[&[5.0]]));
        assert_eq!(tridiagonal_len(3), 7);
        let m3 = build_tridiagonal(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(m3.get(0, 2), 0.0);
        assert_eq!(m3.get(2, 0), 0.0);
        assert_eq!(m3.get(1, 2), 5.0);
        assert_eq!(m3.get(2, 1), 7.0);
        assert!(build_tridiagonal(&[1.0, 2.0]).is_err());
        assert!(build_tridiagonal(&[]).is_err());
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_std_normal(&[0.0], &[1.0]), 0.0);
        assert_eq!(kl_std_normal(&[1.0], &[1.0]), 0.5);
        let e = std::f64::consts::E;
        assert!((kl_std_normal(&[0.0], &[e]) - (0.5 * e * e - 1.5)).abs() < 1e-12);
        assert!((kl_std_normal(&[0.0], &[e]) - 2.194528).abs() < 1e-6);
    }

    #[test]
    fn sampling() {
        assert_eq!(sample_latent(&[0.0], &[2.0], &[1.0]), vec![2.0]);
        assert_eq!(sample_latent(&[0.5, -1.0], &[SIGMA_MIN; 2], &[0.3, -0.2])[0], 0.5 + 0.3 * SIGMA_MIN);
    }

    #[test]
    fn zero_encoder_stays_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = config(2);
        let enc = EncoderParams::new(&mut store, 8, &cfg, &mut rng);
        zero_all(&mut store);
        let steps = encode_sequence(&vec![vec![0.0; 8]; 5], &enc, &store).unwrap();
        assert_eq!(steps.len(), 5);
        for s in &steps {
            assert!(s.hidden.iter().all(|&h| h == 0.0));
            assert_eq!(s.deviation, vec![1.0, 1.0]);
        }
        let one = encode_sequence(&[vec![0.1; 8]], &enc, &store).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn lstm_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            cell: CellKind::Lstm,
            ..config(2)
        };
        let enc = EncoderParams::new(&mut store, 8, &cfg, &mut rng);
        zero_all(&mut store);
        let steps = encode_sequence(&vec![vec![0.0; 8]; 3], &enc, &store).unwrap();
        assert!(steps.iter().all(|s| s.hidden.iter().all(|&h| h == 0.0)));
    }

    #[test]
    fn encoder_rejects_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, 2, &config(2), &mut rng);
        let err = encode_sequence(&[vec![0.0, 0.0], vec![f64::NAN, 0.0]], &enc, &store).unwrap_err();
        assert!(err.to_string().contains("timestep 1"));
    }

    #[test]
    fn zero_aux_nets_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let k = KoopmanParams::new(&mut store, &config(3), &mut rng);
        zero_all(&mut store);
        let (m, s) = koopman_propagate(&[0.3, -1.0, 2.0], &[0.5, 1.5, 0.1], &[0.7; 8], &k, &store).unwrap();
        assert_eq!(m, vec![0.3, -1.0, 2.0]);
        assert_eq!(s, vec![0.5, 1.5, 0.1]);
    }

    #[test]
    fn identity_operator_doubles_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let k = KoopmanParams::new(&mut store, &config(2), &mut rng);
        zero_all(&mut store);
        // Output bias [1, 1, 0, 0] makes K_mu the identity for every input.
        let bias = k.mean_aux.output_layer().bias;
        store.get_mut(bias).data_mut().copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        let (m, _) = koopman_propagate(&[1.0, 2.0], &[1.0, 1.0], &[0.0; 8], &k, &store).unwrap();
        assert_eq!(m, vec![2.0, 4.0]);
    }

    #[test]
    fn propagation_matches_dense_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let j = 4;
        let k = KoopmanParams::new(&mut store, &config(j), &mut rng);
        let mean = [0.4, -0.3, 1.1, 0.2];
        let dev = [0.9, 1.2, 0.5, 2.0];
        let lane = [0.1, -0.2, 0.3, 0.0, 0.5, -0.6, 0.7, 0.05];

        // Raw operators from the aux nets, then a dense O(j^2) product.
        let mut tape = Tape::new();
        let raw_of = |tape: &mut Tape, net: &Mlp, v: &[f64]| {
            let mut input = v.to_vec();
            input.extend_from_slice(&lane);
            let x = tape.input(Tensor::from_vec(1, input.len(), input));
            let y = net.forward(tape, &store, x);
            tape.value(y).data().to_vec()
        };
        let dense = |raw: &[f64], v: &[f64]| -> Vec<f64> {
            let m = build_tridiagonal(raw).unwrap();
            (0..j).map(|r| (0..j).map(|c| m.get(r, c) * v[c]).sum::<f64>() + v[r]).collect()
        };
        let want_mean = dense(&raw_of(&mut tape, &k.mean_aux, &mean), &mean);
        let want_dev: Vec<f64> = dense(&raw_of(&mut tape, k.deviation_aux.as_ref().unwrap(), &dev), &dev)
            .into_iter()
            .map(|v| v.abs().clamp(SIGMA_MIN, SIGMA_MAX))
            .collect();

        let (m, s) = koopman_propagate(&mean, &dev, &lane, &k, &store).unwrap();
        for (a, b) in m.iter().zip(&want_mean).chain(s.iter().zip(&want_dev)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deterministic_variant_has_no_deviation_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            variant: Variant::SaberAe,
            ..config(2)
        };
        let k = KoopmanParams::new(&mut store, &cfg, &mut rng);
        assert!(k.deviation_aux.is_none());
        let enc = EncoderParams::new(&mut store, 8, &cfg, &mut rng);
        assert!(enc.deviation.is_none());
    }

    #[test]
    fn decoder_shared_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let dec = DecoderParams::new(&mut store, &config(2), &mut rng);
        let z = [0.3, -0.8];
        assert_eq!(decode(&z, &dec, &store), decode(&z, &dec, &store));
        zero_all(&mut store);
        assert_eq!(decode(&z, &dec, &store), [0.0, 0.0]);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let dec = DecoderParams::new(&mut store, &config(2), &mut rng);
        let z = Tensor::from_rows(&[&[0.4, -0.7]]);
        let target = Tensor::from_rows(&[&[1.5, -0.25]]);
        let loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let zi = tape.input(z.clone());
            let ti = tape.input(target.clone());
            let y = dec.forward(&mut tape, store, zi);
            let d = tape.sub(y, ti);
            let n = tape.row_norm(d);
            let l = tape.weighted_sum(n, &[1.0]);
            (tape.value(l).data()[0], tape.backward(l))
        };
        let (_, grads) = loss(&store);
        let h = 1e-5;
        for id in 0..store.len() {
            let g = grads[id].as_ref().unwrap();
            for e in 0..g.data().len() {
                let orig = store.get(id).data()[e];
                store.get_mut(id).data_mut()[e] = orig + h;
                let up = loss(&store).0;
                store.get_mut(id).data_mut()[e] = orig - h;
                let down = loss(&store).0;
                store.get_mut(id).data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = g.data()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!((a - numeric).abs() / denom < 1e-4 || (a - numeric).abs() < 1e-9, "{} elem {e}: {a} vs {numeric}", store.name(id));
            }
        }
    }
}
