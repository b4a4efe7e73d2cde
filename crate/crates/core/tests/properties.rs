mod common;

use common::*;
use oom_core::config::PipelineConfig;
use oom_core::descriptor::hard::encode_hard;
use oom_core::descriptor::soft::{soft_assign, VladCodebook};
use oom_core::ingest::{BBox, DetectionMode, Detections, HardDetection, ImageRecord};
use oom_core::metrics::adjusted_rand_index;
use oom_core::oom::{
    build_occurrence_model, build_posterior_model, discriminability_at, select_objects, Aggregation, ClassPrior,
    FallbackRule, OccurrenceModel, ThresholdGrid,
};
use oom_core::PyramidLayout;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occurrence_curves_never_increase(seed in any::<u64>()) {
        let grid = ThresholdGrid::default();
        let mut rng = rng(seed);
        let mode = if seed % 3 == 0 { DetectionMode::Soft } else { DetectionMode::Hard };
        let m = random_manifest(&mut rng, &grid, mode);
        let oom = build_occurrence_model(&m, &grid).unwrap();
        for o in 0..m.vocabulary.len() {
            for c in 0..m.classes.len() {
                let curve = oom.curve(o, c);
                prop_assert!(curve.windows(2).all(|w| w[1] <= w[0]));
                prop_assert!(curve.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn posteriors_follow_a_class_permutation(seed in any::<u64>(), n_c in 2usize..7) {
        let grid = ThresholdGrid::new(0.0, 1.0, 0.1).unwrap();
        let mut rng = rng(seed);
        let oom = random_occurrence(&mut rng, 4, n_c, &grid);
        let prior = random_prior(&mut rng, n_c);
        let mut perm: Vec<usize> = (0..n_c).collect();
        perm.shuffle(&mut rng);

        // Class `k` of the permuted model is class `perm[k]` of the original.
        let n_t = grid.len();
        let mut probs = Vec::new();
        for o in 0..4 {
            for &c in &perm {
                probs.extend_from_slice(oom.curve(o, c));
            }
        }
        let permuted = OccurrenceModel::from_parts(names("o", 4), names("c", n_c), grid.clone(), probs).unwrap();
        let permuted_prior = ClassPrior::new(perm.iter().map(|&c| prior.weights()[c]).collect()).unwrap();

        let a = build_posterior_model(&oom, &prior, FallbackRule::Prior).unwrap();
        let b = build_posterior_model(&permuted, &permuted_prior, FallbackRule::Prior).unwrap();
        for o in 0..4 {
            for t in 0..n_t {
                for (k, &c) in perm.iter().enumerate() {
                    prop_assert_eq!(b.posterior(o, k, t).to_bits(), a.posterior(o, c, t).to_bits());
                }
                prop_assert_eq!(
                    discriminability_at(&a, o, t).unwrap().to_bits(),
                    discriminability_at(&b, o, t).unwrap().to_bits()
                );
            }
        }
        let sa = select_objects(&a, 2, Aggregation::Mean).unwrap();
        let sb = select_objects(&b, 2, Aggregation::Mean).unwrap();
        prop_assert_eq!(sa.selected, sb.selected);
    }

    #[test]
    fn hard_descriptor_ignores_detection_order(seed in any::<u64>()) {
        let grid = ThresholdGrid::default();
        let mut rng = rng(seed);
        let oom = random_occurrence(&mut rng, 8, 3, &grid);
        let post = build_posterior_model(&oom, &ClassPrior::uniform(3), FallbackRule::Prior).unwrap();
        let sel = select_objects(&post, 5, Aggregation::Max).unwrap();
        let mut dets: Vec<HardDetection> = (0..rng.random_range(0..12))
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..0.9), rng.random_range(0.0..0.9));
                HardDetection {
                    object: rng.random_range(0..8),
                    score: rng.random_range(-0.1..1.1),
                    bbox: BBox::new(x, y, x + 0.1, y + 0.1).unwrap(),
                }
            })
            .collect();
        let record = |d: Vec<HardDetection>| ImageRecord {
            image_id: "r".into(),
            scene_class: None,
            domain: None,
            detections: Detections::Hard(d),
        };
        let layout = PyramidLayout::default();
        let a = encode_hard(&record(dets.clone()), &post, &sel, &layout).unwrap();
        dets.shuffle(&mut rng);
        let b = encode_hard(&record(dets), &post, &sel, &layout).unwrap();
        prop_assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
        // Every non-empty cell is a probability vector over the classes.
        for cell in a.0.chunks(3) {
            let s: f64 = cell.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_assignment_is_a_distribution(
        centers in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..6),
        v in prop::collection::vec(-10.0f64..10.0, 3),
        sigma in 0.05f64..5.0,
    ) {
        let cb = VladCodebook::new(centers, sigma).unwrap();
        let w = soft_assign(&cb, &v);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_grid_index_is_nearest(score in -0.5f64..1.5) {
        let grid = ThresholdGrid::default();
        let i = grid.nearest_index(score);
        let clamped = score.clamp(grid.min(), grid.max());
        let best = grid.values().iter().map(|v| (v - clamped).abs()).fold(f64::INFINITY, f64::min);
        prop_assert!(((grid.values()[i] - clamped).abs() - best).abs() < 1e-12);
    }

    #[test]
    fn ari_is_symmetric_and_label_free(
        a in prop::collection::vec(0usize..4, 2..40),
        shift in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = rng(seed);
        let b: Vec<usize> = a.iter().map(|_| rng.random_range(0..3)).collect();
        let relabeled: Vec<usize> = a.iter().map(|x| (x + shift) % 4).collect();
        prop_assert!((adjusted_rand_index(&a, &b) - adjusted_rand_index(&b, &a)).abs() < 1e-12);
        prop_assert!((adjusted_rand_index(&a, &relabeled) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_text_round_trips(
        step in prop::sample::select(vec![0.01, 0.05, 0.1, 0.25]),
        topics in 1usize..9,
        objects in prop::option::of(1usize..300),
        seed in any::<u64>(),
        epochs in 1usize..50,
        global in any::<bool>(),
    ) {
        let cfg = PipelineConfig {
            theta_step: step,
            topics,
            objects,
            seed,
            epochs,
            global_cv: global,
            ..PipelineConfig::default()
        };
        let back = PipelineConfig::parse_str(&cfg.to_config_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
