use ean_core::data::{generate_split, GeneratorConfig};
use ean_core::eval::{
    average_precision, decode_predictions, evaluate, evaluate_model, match_predictions, oracle_predictions,
    scene_targets, EvalConfig, Prediction,
};
use ean_core::geometry::{MapClass, Point};
use ean_core::model::{DecoderConfig, Model};
use ean_core::EanRng;
use proptest::prelude::*;
use rand::SeedableRng;

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        channels: 4,
        height: 24,
        width: 12,
        ..Default::default()
    }
}

#[test]
fn ground_truth_oracle_scores_one() {
    let scenes = generate_split(&GeneratorConfig::default(), 3, 0, 16).unwrap();
    let gts: Vec<_> = scenes.iter().map(|s| scene_targets(s, 10).unwrap()).collect();
    let preds: Vec<_> = gts.iter().map(|g| oracle_predictions(g)).collect();
    let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
    assert_eq!(r.map, 1.0);
    for c in &r.classes {
        assert!(c.per_threshold.iter().all(|t| t.ap == Some(1.0)), "{:?}", c.class);
    }
}

#[test]
fn hand_computed_five_sixths() {
    let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2).unwrap();
    assert!((ap - 5.0 / 6.0).abs() <= 1e-15, "{ap}");
}

#[test]
fn threshold_is_strict() {
    let gt: Vec<Point> = vec![[0.0, 0.0], [0.0, 1.0]];
    let shifted: Vec<Point> = vec![[0.5, 0.0], [0.5, 1.0]];
    let p = Prediction { class: MapClass::Divider, score: 1.0, points: shifted };
    assert_eq!(match_predictions(std::slice::from_ref(&p), &[&gt], 0.5).unwrap(), vec![false]);
    assert_eq!(match_predictions(&[p], &[&gt], 0.5000001).unwrap(), vec![true]);
}

#[test]
fn greedy_matching_visits_by_score() {
    let gt: Vec<Point> = vec![[0.0, 0.0], [0.0, 1.0]];
    let near = Prediction { class: MapClass::Boundary, score: 0.2, points: gt.clone() };
    let far = Prediction { class: MapClass::Boundary, score: 0.9, points: vec![[0.3, 0.0], [0.3, 1.0]] };
    // the higher-scored but worse prediction claims the only ground truth
    assert_eq!(match_predictions(&[near, far], &[&gt], 0.5).unwrap(), vec![false, true]);
}

#[test]
fn class_without_ground_truth_or_predictions_is_undefined() {
    let gts = vec![vec![]];
    let preds = vec![vec![]];
    let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
    assert!(r.classes.iter().all(|c| c.ap.is_none()));
    assert_eq!(r.map, 0.0);
}

#[test]
fn mismatched_split_lengths_are_rejected() {
    assert!(evaluate(&[vec![]], &[], &EvalConfig::default()).is_err());
    let bad = EvalConfig { thresholds: vec![1.0, 0.5], score_floor: 0.0 };
    assert!(evaluate(&[], &[], &bad).is_err());
}

#[test]
fn decode_picks_best_foreground_class() {
    let probs = vec![vec![0.1, 0.3, 0.2, 0.4]];
    let points = vec![vec![[0.5, 0.5], [1.0, 1.0]]];
    let p = decode_predictions(&probs, &points);
    assert_eq!(p[0].class, MapClass::Divider);
    assert_eq!(p[0].score, 0.3);
    assert_eq!(p[0].points, vec![[0.0, 0.0], [15.0, 30.0]]);
}

#[test]
fn untrained_model_ap_is_monotone_in_threshold() {
    let g = small_generator();
    let scenes = generate_split(&g, 1, 0, 6).unwrap();
    let cfg = DecoderConfig {
        bev_channels: 4,
        bev_height: 24,
        bev_width: 12,
        dim: 16,
        groups: 10,
        ..Default::default()
    };
    let model = Model::new(cfg, &mut EanRng::seed_from_u64(0)).unwrap();
    let r = evaluate_model(&model, &scenes, &EvalConfig::default()).unwrap();
    assert!(r.map < 0.2, "untrained mAP {}", r.map);
    for c in &r.classes {
        let aps: Vec<f64> = c.per_threshold.iter().map(|t| t.ap.unwrap_or(0.0)).collect();
        assert!(aps.windows(2).all(|w| w[0] <= w[1]), "{:?}: {aps:?}", c.class);
    }
}

proptest! {
    #[test]
    fn ap_lies_in_unit_interval(flags in prop::collection::vec(any::<bool>(), 0..40), extra in 0usize..5) {
        let scores: Vec<f64> = (0..flags.len()).map(|i| 1.0 - i as f64 / 64.0).collect();
        let total = flags.iter().filter(|&&f| f).count() + extra;
        if let Some(ap) = average_precision(&flags, &scores, total) {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn ap_is_monotone_in_threshold_for_noisy_predictions(seed in any::<u64>(), noise in 0.0f64..2.0) {
        use rand::Rng;
        let mut rng = EanRng::seed_from_u64(seed);
        let scenes = generate_split(&small_generator(), seed % 1000, 0, 3).unwrap();
        let gts: Vec<_> = scenes.iter().map(|s| scene_targets(s, 10).unwrap()).collect();
        let preds: Vec<Vec<Prediction>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .map(|e| Prediction {
                        class: e.class,
                        score: rng.random_range(0.0..1.0),
                        points: e
                            .points
                            .iter()
                            .map(|p| [p[0] + noise * rng.random_range(-1.0..1.0), p[1] + noise * rng.random_range(-1.0..1.0)])
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
        for c in &r.classes {
            let aps: Vec<f64> = c.per_threshold.iter().filter_map(|t| t.ap).collect();
            prop_assert!(aps.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
