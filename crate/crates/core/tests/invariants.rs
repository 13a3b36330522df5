mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saber_core::scoring::window_pred_errors;
use saber_core::{
    generate, score_scene, BatchInput, Detector, MapSpec, Model, Noise, Sampling, ScenarioKind, ScenarioSpec,
    Scene, ScoreOptions, Track, Variant,
};

const VARIANTS: [Variant; 5] = [
    Variant::SaberVae,
    Variant::SaberAe,
    Variant::VvRae,
    Variant::RaePred,
    Variant::RaeRecon,
];

/// Two vehicles that drift in and out of each other's radius, so some
/// neighbor slots are masked; lane masks vary with the lane.
fn mixed_scene() -> Scene {
    let mut scene = constant_velocity_scene("mix", 30, &[(50.0, -5.25, 1.25), (20.0, -1.75, 3.0)]);
    scene.tracks[1].positions[0] = None;
    scene
}

fn fingerprint(model: &Model, batch: &BatchInput, noise: &Noise) -> Vec<u64> {
    let pass = model.forward(batch, Sampling::Noise(noise), (1e-4, 1e-4)).unwrap();
    let mut out = vec![pass.loss_value.to_bits()];
    for step in &pass.steps {
        out.extend(pass.tape.value(step.mean).data().iter().map(|v| v.to_bits()));
        out.extend(pass.tape.value(step.reconstruction).data().iter().map(|v| v.to_bits()));
        if let Some(p) = step.prediction {
            out.extend(pass.tape.value(p).data().iter().map(|v| v.to_bits()));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_slots_change_nothing(seed in any::<u64>(), junk in prop::collection::vec(-1e3f64..1e3, 64)) {
        let scene = mixed_scene();
        let config = small_config(Variant::SaberVae);
        let windows = windows_of(&scene, &config);
        let refs: Vec<_> = windows.iter().collect();
        let batch = BatchInput::from_windows(&refs).unwrap();
        let mut noisy = batch.clone();
        let mut masked = 0;
        let mut next = junk.iter().cycle();
        for step in &mut noisy.steps {
            for (i, &m) in step.neighbor_mask.clone().iter().enumerate() {
                if !m {
                    step.neighbors.row_mut(i).copy_from_slice(&[*next.next().unwrap(), *next.next().unwrap()]);
                    masked += 1;
                }
            }
            for (i, &m) in step.lane_mask.clone().iter().enumerate() {
                if !m {
                    step.lanes.row_mut(i).copy_from_slice(&[*next.next().unwrap(), *next.next().unwrap()]);
                    masked += 1;
                }
            }
        }
        prop_assert!(masked > 0);
        for variant in VARIANTS {
            let model = Model::new(small_model_config(variant), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Noise::sample(&mut rng, model.encoded_steps(batch.len()), batch.rows, 2);
            prop_assert_eq!(fingerprint(&model, &batch, &noise), fingerprint(&model, &noisy, &noise), "{}", variant);
        }
    }

    #[test]
    fn masked_lane_slots_leave_window_errors_unchanged(seed in 0u64..1000, junk in -50f64..50.0) {
        let scene = mixed_scene();
        let config = small_config(Variant::SaberVae);
        let windows = windows_of(&scene, &config);
        let mut perturbed = windows.clone();
        for w in &mut perturbed {
            for seq in &mut w.observations {
                for obs in seq.iter_mut().flatten() {
                    for l in 0..3 {
                        if !obs.lane_mask[l] {
                            obs.lanes[l] = [junk, -junk];
                        }
                    }
                }
            }
        }
        let options = ScoreOptions::default();
        let detector = Detector::Model(Box::new(Model::new(small_model_config(Variant::SaberVae), seed).unwrap()));
        prop_assert_eq!(
            window_pred_errors(&detector, &windows, &options).unwrap(),
            window_pred_errors(&detector, &perturbed, &options).unwrap()
        );
    }

    #[test]
    fn vehicles_beyond_radius_never_influence_scores(
        offsets in prop::collection::vec((46.0f64..200.0, -7.0f64..7.0), 25),
        present in prop::collection::vec(any::<bool>(), 25),
    ) {
        let base = constant_velocity_scene("far", 25, &[(100.0, -1.75, 1.25)]);
        let a = &base.tracks[0];
        let far = Track {
            vehicle_id: 1,
            positions: (0..25)
                .map(|t| {
                    let p = a.positions[t].unwrap();
                    let (dx, y) = offsets[t];
                    // Vertical spread is at most 14 m, so the horizontal gap alone exceeds the radius.
                    present[t].then_some([p[0] + dx, y])
                })
                .collect(),
        };
        let mut with_far = base.clone();
        with_far.tracks.push(far);
        let options = ScoreOptions { window_length: 6, ..ScoreOptions::default() };
        for variant in [Variant::SaberVae, Variant::VvRae] {
            let detector = Detector::Model(Box::new(Model::new(small_model_config(variant), 1).unwrap()));
            let alone = score_scene(&detector, &base, &options).unwrap();
            let joint = score_scene(&detector, &with_far, &options).unwrap();
            prop_assert_eq!(&alone.vehicle_errors[0], &joint.vehicle_errors[0]);
        }
    }
}

#[test]
fn vehicle_order_does_not_matter() {
    let options = ScoreOptions::default();
    let model = Model::new(small_model_config(Variant::SaberVae), 9).unwrap();
    let detector = Detector::Model(Box::new(model));
    for seed in 0..4 {
        let scene = generate(&ScenarioSpec::new(ScenarioKind::Overtaking, 40, seed), &MapSpec::default()).unwrap();
        let mut swapped = scene.clone();
        swapped.tracks.reverse();
        let a = score_scene(&detector, &scene, &options).unwrap();
        let b = score_scene(&detector, &swapped, &options).unwrap();
        // Two vehicles share a single neighbor slot, so the result is exact.
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.vehicle_errors[0], b.vehicle_errors[1]);

        // With three vehicles the neighbor sum order changes; allow rounding.
        let other = generate(&ScenarioSpec::new(ScenarioKind::Following, 40, seed + 10), &MapSpec::default()).unwrap();
        let mut three = scene.clone();
        three.tracks.push(Track {
            vehicle_id: 2,
            ..other.tracks[0].clone()
        });
        let mut rotated = three.clone();
        rotated.tracks.rotate_left(1);
        let a = score_scene(&detector, &three, &options).unwrap();
        let b = score_scene(&detector, &rotated, &options).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0)),
                _ => assert_eq!(x, y),
            }
        }
    }
}

#[test]
fn cvm_is_zero_on_constant_velocity() {
    let scene = constant_velocity_scene("cv", 40, &[(10.0, -5.25, 1.25), (40.0, -1.75, 2.5), (300.0, 1.75, -1.5)]);
    let s = score_scene(&Detector::Cvm, &scene, &ScoreOptions::default()).unwrap();
    assert_eq!(s.scores[0], None);
    assert!(s.scores[2..].iter().all(|v| *v == Some(0.0)));
}
