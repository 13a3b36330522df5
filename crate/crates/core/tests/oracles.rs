mod common;

use common::*;
use proptest::prelude::*;
use saber_core::metrics::{fpr_at_tpr, metrics, pr_auc, roc_auc};
use saber_core::scene::build_observations;
use saber_core::scoring::{average_overlaps, window_pred_errors};
use saber_core::{evaluate, generate, Detector, Label, MapSpec, Model, ScenarioKind, ScenarioSpec, ScoreOptions, ScoreSeries, Variant};

/// Scores from a small value set so ties are common, with both classes present.
fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=50)
        .prop_flat_map(|n| (prop::collection::vec(0u8..12, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 * 0.125 - 0.5).collect(), l))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn roc_auc_matches_concordance((scores, labels) in labeled_scores()) {
        let got = roc_auc(&scores, &labels).unwrap();
        prop_assert!((got - concordance_auroc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn pr_auc_matches_enumeration((scores, labels) in labeled_scores()) {
        let got = pr_auc(&scores, &labels).unwrap();
        prop_assert!((got - exhaustive_average_precision(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn fpr_matches_enumeration((scores, labels) in labeled_scores()) {
        let got = fpr_at_tpr(&scores, &labels, 0.95).unwrap();
        prop_assert_eq!(got, exhaustive_fpr_at_tpr(&scores, &labels, 0.95));
    }

    #[test]
    fn metrics_invariant_under_monotone_rescaling((scores, labels) in labeled_scores(), shift in -3i32..3) {
        let scale = 2f64.powi(shift);
        let scaled: Vec<f64> = scores.iter().map(|s| s * scale + 1.0).collect();
        prop_assert_eq!(metrics(&scores, &labels).unwrap(), metrics(&scaled, &labels).unwrap());
    }

    #[test]
    fn ignored_timesteps_never_affect_metrics(
        (scores, labels) in labeled_scores(),
        ignored in prop::collection::vec(any::<bool>(), 50),
        junk in prop::collection::vec(-100.0f64..100.0, 50),
    ) {
        let make = |replace: bool| {
            let n = scores.len();
            let mut labs = Vec::new();
            let mut s = Vec::new();
            for i in 0..n {
                labs.push(if labels[i] { Label::Abnormal } else { Label::Normal });
                s.push(Some(scores[i]));
                if ignored[i] {
                    labs.push(Label::Ignored);
                    s.push(Some(if replace { junk[i] } else { 0.0 }));
                }
            }
            ScoreSeries {
                scene_id: "s".into(),
                anomaly_type: Some("kind".into()),
                labels: labs,
                scores: s,
                vehicle_errors: vec![],
                coverage: vec![],
            }
        };
        prop_assert_eq!(evaluate(&[make(false)]).unwrap(), evaluate(&[make(true)]).unwrap());
    }
}

#[test]
fn perfect_scorer() {
    let scores: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let labels: Vec<bool> = (0..40).map(|i| i >= 30).collect();
    let m = metrics(&scores, &labels).unwrap();
    assert_eq!(m.auroc, 1.0);
    assert_eq!(m.aupr_abnormal, 1.0);
    assert_eq!(m.aupr_normal, 1.0);
    assert_eq!(m.fpr_at_95_tpr, 0.0);
}

fn random_scene(i: u64) -> saber_core::Scene {
    let kinds = [ScenarioKind::Overtaking, ScenarioKind::WrongWay, ScenarioKind::Following, ScenarioKind::Skidding];
    let spec = ScenarioSpec::new(kinds[i as usize % kinds.len()], 25 + (i as usize * 7) % 40, i);
    generate(&spec, &MapSpec::default()).unwrap()
}

#[test]
fn overlap_average_matches_brute_force() {
    let options = ScoreOptions::default();
    let model = Model::new(small_model_config(Variant::SaberVae), 5).unwrap();
    for (d, detector) in [Detector::Cvm, Detector::Model(Box::new(model))].iter().enumerate() {
        let scenes = if d == 0 { 20 } else { 3 };
        for i in 0..scenes {
            let scene = random_scene(i);
            let obs = build_observations(&scene, options.neighbor_radius).unwrap();
            let config = small_config(Variant::SaberVae);
            let windows = windows_of(&scene, &config);
            let errors = window_pred_errors(detector, &windows, &options).unwrap();
            let indexed: Vec<_> = windows.iter().map(|w| w.start).zip(errors).collect();
            let (means, _) = average_overlaps(&indexed, obs.vehicle_count(), obs.steps()).unwrap();
            assert_eq!(means, brute_force_overlaps(&indexed, obs.vehicle_count(), obs.steps()), "scene {i}");
        }
    }
}
