use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use filmworld::dataset::DatasetFamily;
use filmworld::semantics::{
    build_vocabulary, evaluate, paraphrase_count, realize_with, sample_caption, tokenize, Caption, Truth,
};
use filmworld::tensor::{Checkpoint, Tape, Tensor};
use filmworld::trainer::standard_eval_points;
use filmworld::worldgen::{overlap_fraction, rasterize, sample_scene, SceneSpec};

fn family() -> impl Strategy<Value = DatasetFamily> {
    (0..DatasetFamily::ALL.len()).prop_map(|i| DatasetFamily::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenes_respect_overlap_and_canvas(seed in any::<u64>(), overlap in 0.05f64..0.5) {
        let spec = SceneSpec { max_overlap: overlap, ..SceneSpec::default() };
        let scene = sample_scene(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(spec.count_sets.contains(&scene.len()));
        for (i, a) in scene.objects.iter().enumerate() {
            prop_assert!(a.is_contained());
            prop_assert!(!spec.withheld_combos.contains(&(a.shape, a.color)));
            for b in &scene.objects[i + 1..] {
                let f = overlap_fraction(a, b);
                prop_assert!((0.0..=overlap).contains(&f), "{f}");
            }
        }
    }

    #[test]
    fn rasterizing_is_deterministic(seed in any::<u64>()) {
        let scene = sample_scene(&SceneSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = rasterize(&scene, 32, 2).to_bytes();
        prop_assert_eq!(a.len(), 32 * 32 * 3);
        prop_assert_eq!(a, rasterize(&scene, 32, 2).to_bytes());
    }

    #[test]
    fn sampled_captions_hit_their_target(seed in any::<u64>(), fam in family(), target in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = fam.scene_spec(&SceneSpec::default());
        let scene = sample_scene(&spec, &mut rng).unwrap();
        if let Ok(c) = sample_caption(fam, &scene, target, &mut rng) {
            prop_assert!(c.validate().is_ok());
            prop_assert_eq!(evaluate(&c, &scene).as_bool(), Some(target));
            let back: Caption = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn every_paraphrase_tokenizes_into_the_vocabulary(seed in any::<u64>(), fam in family()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(&fam.scene_spec(&SceneSpec::default()), &mut rng).unwrap();
        let vocab = build_vocabulary();
        if let Ok(c) = sample_caption(fam, &scene, seed % 2 == 0, &mut rng) {
            for p in 0..paraphrase_count(&c) {
                let surface = realize_with(&c, p);
                prop_assert!(surface.ends_with('.'));
                for tok in tokenize(&surface) {
                    prop_assert!(vocab.contains(&tok), "{tok} in {surface}");
                }
            }
        }
    }

    #[test]
    fn complement_comparators_negate(seed in any::<u64>(), target in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for fam in [DatasetFamily::Numbers, DatasetFamily::Quantifiers] {
            let scene = sample_scene(&fam.scene_spec(&SceneSpec::default()), &mut rng).unwrap();
            let Ok(c) = sample_caption(fam, &scene, target, &mut rng) else { continue };
            let flipped = match c {
                Caption::Number { comparator, count, restrictor, body } =>
                    Caption::Number { comparator: comparator.complement(), count, restrictor, body },
                Caption::Quantifier { comparator, fraction, restrictor, body } if !fraction.is_extreme() =>
                    Caption::Quantifier { comparator: comparator.complement(), fraction, restrictor, body },
                _ => continue,
            };
            prop_assert_eq!(evaluate(&flipped, &scene), if target { Truth::False } else { Truth::True });
        }
    }

    #[test]
    fn eval_points_follow_the_rule(iterations in 0u64..300_000) {
        let pts = standard_eval_points(iterations);
        prop_assert_eq!(pts[0], 0);
        prop_assert!(pts.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(pts.iter().all(|&p| p <= iterations));
        for p in (0..=iterations).step_by(500) {
            let expected = (p <= 10_000 && p % 1000 == 0) || (p > 10_000 && p % 5000 == 0);
            prop_assert_eq!(pts.contains(&p), expected, "{}", p);
        }
    }

    #[test]
    fn checkpoints_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
        let t = Tensor::from_fn(&dims, |i| (i as f32 + seed as f32).sin());
        let ck = Checkpoint {
            metadata: format!("{{\"seed\":{seed}}}"),
            params: vec![("w".into(), t.clone())],
            buffers: vec![("b".into(), t)],
            optimizer: None,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn spatial_softmax_is_a_distribution(n in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u16>()) {
        let x = Tensor::<f64>::from_fn(&[n, h, w], |i| ((i * 7 + seed as usize) % 13) as f64 - 6.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.spatial_softmax(v).unwrap();
        for row in tape.value(y).data().chunks(h * w) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
