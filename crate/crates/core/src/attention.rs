//! Masked multi-head attention for vehicle-vehicle and lane-vehicle
//! interactions.
//!
//! Queries come from a vehicle's own displacement; keys and values come from
//! neighbor displacements (vehicle-vehicle) or lane-node offsets
//! (lane-vehicle). Each projection is a two-layer perceptron, heads are
//! concatenated and merged by a learned linear map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore};
use crate::scene::Point;
use crate::tape::{Tape, Tensor, Var};

pub const DEFAULT_HEADS: usize = 8;

/// Projection and merge weights of one attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Mlp,
    pub key: Mlp,
    pub value: Mlp,
    pub merge: Linear,
    pub heads: usize,
    pub size: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        size: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || size == 0 || size % heads != 0 {
            return Err(Error::Config(format!(
                "attention size {size} must be a positive multiple of head count {heads}"
            )));
        }
        Ok(AttentionParams {
            query: Mlp::new(store, &format!("{name}.query"), &[input_dim, size, size], rng),
            key: Mlp::new(store, &format!("{name}.key"), &[input_dim, size, size], rng),
            value: Mlp::new(store, &format!("{name}.value"), &[input_dim, size, size], rng),
            merge: Linear::new(store, &format!("{name}.merge"), size, size, rng),
            heads,
            size,
        })
    }

    /// Attention of `n` query rows over `slots` keys each.
    ///
    /// `own` is `n x in`, `others` is `(n * slots) x in`. Rows whose slots are
    /// all masked produce a zero embedding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        own: Var,
        others: Var,
        mask: &[bool],
        slots: usize,
    ) -> Var {
        let n = tape.value(own).rows();
        let q = self.query.forward(tape, store, own);
        let k = self.key.forward(tape, store, others);
        let v = self.value.forward(tape, store, others);
        let scale = 1.0 / (self.size as f64).sqrt();
        let heads = tape.attention(q, k, v, mask, slots, self.heads, scale);
        let merged = self.merge.forward(tape, store, heads);
        let any: Vec<bool> = (0..n)
            .map(|r| mask[r * slots..(r + 1) * slots].iter().any(|&m| m))
            .collect();
        if any.iter().all(|&a| a) {
            merged
        } else {
            let zeros = tape.input(Tensor::zeros(n, self.size));
            tape.select_rows(merged, zeros, &any)
        }
    }
}

fn single_row(
    params: &AttentionParams,
    store: &ParamStore,
    own: Point,
    others: &[Point],
    mask: &[bool],
) -> Vec<f64> {
    let slots = others.len();
    if slots == 0 {
        return vec![0.0; params.size];
    }
    let mut tape = Tape::new();
    let own = tape.input(Tensor::from_vec(1, 2, own.to_vec()));
    let flat: Vec<f64> = others.iter().flat_map(|p| p.iter().copied()).collect();
    let others = tape.input(Tensor::from_vec(slots, 2, flat));
    let out = params.forward(&mut tape, store, own, others, mask, slots);
    tape.value(out).data().to_vec()
}

/// Vehicle-vehicle embedding for one vehicle at one timestep.
pub fn vv_self_attention(
    displacement: Point,
    neighbors: &[Point],
    neighbor_mask: &[bool],
    params: &AttentionParams,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    if neighbors.len() != neighbor_mask.len() {
        return Err(Error::Parameter(format!(
            "{} neighbors but {} mask entries",
            neighbors.len(),
            neighbor_mask.len()
        )));
    }
    Ok(single_row(params, store, displacement, neighbors, neighbor_mask))
}

/// Lane-conditioned embedding for one vehicle at one timestep.
pub fn lane_attention(
    displacement: Point,
    lanes: &[Point; 3],
    lane_mask: &[bool; 3],
    params: &AttentionParams,
    store: &ParamStore,
) -> Vec<f64> {
    if !lane_mask.iter().any(|&m| m) {
        log::warn!("lane attention with every lane slot masked; returning zero embedding");
    }
    single_row(params, store, displacement, lanes, lane_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(size: usize, heads: usize) -> (ParamStore, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "att", 2, size, heads, &mut rng).unwrap();
        (store, p)
    }

    /// Merged value row for a single key, computed without the attention op.
    fn merged_value(p: &AttentionParams, store: &ParamStore, key: Point) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 2, key.to_vec()));
        let v = p.value.forward(&mut tape, store, x);
        let m = p.merge.forward(&mut tape, store, v);
        tape.value(m).data().to_vec()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rejects_indivisible_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(AttentionParams::new(&mut store, "a", 2, 30, 8, &mut rng).is_err());
    }

    #[test]
    fn empty_neighbor_set_is_zero() {
        let (store, p) = setup(32, 8);
        assert_eq!(vv_self_attention([1.0, 0.0], &[], &[], &p, &store).unwrap(), vec![0.0; 32]);
        let out = vv_self_attention([1.0, 0.0], &[[3.0, 1.0]], &[false], &p, &store).unwrap();
        assert_eq!(out, vec![0.0; 32]);
    }

    #[test]
    fn single_key_returns_its_value() {
        let (store, p) = setup(32, 8);
        let out = vv_self_attention([1.0, 0.2], &[[3.0, 1.0], [9.0, 9.0]], &[true, false], &p, &store).unwrap();
        assert!(close(&out, &merged_value(&p, &store, [3.0, 1.0]), 1e-12));

        let lanes = [[6.0, 0.0], [6.0, 3.5], [0.0, 0.0]];
        let out = lane_attention([2.5, 0.0], &lanes, &[true, false, false], &p, &store);
        assert!(close(&out, &merged_value(&p, &store, [6.0, 0.0]), 1e-12));
    }

    #[test]
    fn identical_slots_give_common_value() {
        let (store, p) = setup(16, 4);
        let lanes = [[5.0, 1.0]; 3];
        let out = lane_attention([2.5, 0.0], &lanes, &[true; 3], &p, &store);
        assert!(close(&out, &merged_value(&p, &store, [5.0, 1.0]), 1e-12));
    }

    #[test]
    fn masked_slot_is_ignored_bit_for_bit() {
        let (store, p) = setup(32, 8);
        let a = lane_attention([2.5, 0.1], &[[6.0, 0.0], [6.0, 3.5], [0.0, 0.0]], &[true, true, false], &p, &store);
        let b = lane_attention([2.5, 0.1], &[[6.0, 0.0], [6.0, 3.5], [-80.0, 4e3]], &[true, true, false], &p, &store);
        assert_eq!(a, b);
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let (store, p) = setup(32, 8);
        let a = vv_self_attention([1.0, 0.2], &[[3.0, 1.0], [-7.0, 2.0]], &[true, true], &p, &store).unwrap();
        let b = vv_self_attention([1.0, 0.2], &[[-7.0, 2.0], [3.0, 1.0]], &[true, true], &p, &store).unwrap();
        assert!(close(&a, &b, 1e-12));

        // Direct recomputation: softmax over the two keys per head, by hand.
        let mut tape = Tape::new();
        let own = tape.input(Tensor::from_vec(1, 2, vec![1.0, 0.2]));
        let ks = tape.input(Tensor::from_vec(2, 2, vec![3.0, 1.0, -7.0, 2.0]));
        let q = p.query.forward(&mut tape, &store, own);
        let k = p.key.forward(&mut tape, &store, ks);
        let v = p.value.forward(&mut tape, &store, ks);
        let (q, k, v) = (tape.value(q).clone(), tape.value(k).clone(), tape.value(v).clone());
        let hd = 32 / 8;
        let mut heads = vec![0.0; 32];
        for h in 0..8 {
            let c = h * hd..(h + 1) * hd;
            let s: Vec<f64> = (0..2)
                .map(|i| q.row(0)[c.clone()].iter().zip(&k.row(i)[c.clone()]).map(|(x, y)| x * y).sum::<f64>() / 32f64.sqrt())
                .collect();
            let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
            let z: f64 = e.iter().sum();
            for d in c.clone() {
                heads[d] = (e[0] * v.get(0, d) + e[1] * v.get(1, d)) / z;
            }
        }
        let hv = tape.input(Tensor::from_vec(1, 32, heads));
        let m = p.merge.forward(&mut tape, &store, hv);
        assert!(close(&a, tape.value(m).data(), 1e-10));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let (store, p) = setup(16, 4);
        assert!(vv_self_attention([0.0, 0.0], &[[1.0, 1.0]], &[], &p, &store).is_err());
    }
}
