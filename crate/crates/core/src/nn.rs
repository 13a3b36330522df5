//! Parameter storage, perceptron layers and the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Tensor, Var};

/// Named trainable tensors. Ids are insertion indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.data().len()).sum()
    }

    /// Loads `tape` node for parameter `id`.
    pub fn var(&self, tape: &mut Tape, id: usize) -> Var {
        tape.param(id, &self.values[id])
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize, rows: usize, cols: usize, gain: f64) -> Tensor {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::with_gain(store, name, in_dim, out_dim, 1.0, rng)
    }

    pub fn with_gain<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, in_dim, in_dim, out_dim, gain),
        );
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(rng, in_dim, 1, out_dim, gain));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_bias(xw, b)
    }
}

/// Perceptron with `tanh` between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths from input to output.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        Self::with_output_gain(store, name, dims, 1.0, rng)
    }

    /// Same as [`Mlp::new`] with the last layer's init range scaled by `gain`.
    pub fn with_output_gain<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let g = if i == last { gain } else { 1.0 };
                Linear::with_gain(store, &format!("{name}.{i}"), w[0], w[1], g, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Parameter ids of the final layer.
    pub fn output_layer(&self) -> Linear {
        *self.layers.last().expect("mlp has layers")
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::sum_squares)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.first[id];
            let v = &mut self.second[id];
            let p = store.get_mut(id).data_mut();
            for (((pi, gi), mi), vi) in p.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, &store);
        for _ in 0..500 {
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            opt.update(&mut store, &[Some(Tensor::from_vec(1, 2, g))]);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Tensor::from_vec(1, 2, vec![3.0, 4.0])), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let c = g[0].as_ref().unwrap().data();
        assert!((c[0] - 0.6).abs() < 1e-12 && (c[1] - 0.8).abs() < 1e-12);
        let mut small = vec![Some(Tensor::from_vec(1, 1, vec![0.5]))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.5]);
    }

    #[test]
    fn zero_weight_mlp_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], &mut rng);
        for id in 0..store.len() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
        let y = mlp.forward(&mut tape, &store, x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }
}
