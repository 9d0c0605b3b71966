use proptest::prelude::*;
use qe_core::data::{ParallelPair, QEPair};
use qe_core::eval::{error_report, pearson};
use qe_core::models::Prediction;
use qe_core::strategies::{augment_dataset, ensemble_predict, grid_select_weight, AugmentPolicy, EnsembleSpec, LabelPolicy};

fn preds(scores: &[f64]) -> Vec<Prediction> {
    scores.iter().enumerate().map(|(index, &score)| Prediction { index, score }).collect()
}

fn varied(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len).prop_filter("needs spread", |v| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() > 1e-6
    })
}

fn two_varied(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    varied(len).prop_flat_map(|x| {
        let n = x.len();
        (Just(x), varied(n..n + 1))
    })
}

proptest! {
    #[test]
    fn pearson_is_symmetric_and_bounded((x, y) in two_varied(2..60)) {
        let (a, b) = (pearson(&x, &y).unwrap(), pearson(&y, &x).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn pearson_affine_invariance((x, y) in two_varied(2..60), a in 0.01f64..100.0, b in -100.0f64..100.0) {
        let r = pearson(&x, &y).unwrap();
        let up: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let down: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((pearson(&up, &y).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&down, &y).unwrap() + r).abs() < 1e-9);
    }

    #[test]
    fn blending_with_self_is_identity(x in prop::collection::vec(-10.0f64..10.0, 1..50), w in 0.0f64..=1.0) {
        let p = preds(&x);
        let out = ensemble_predict(&p, &p, &EnsembleSpec::from_weight_a(w).unwrap()).unwrap();
        for (o, q) in out.iter().zip(&p) {
            prop_assert!((o.score - q.score).abs() < 1e-12);
        }
    }

    #[test]
    fn blending_commutes_with_swapped_weights((a, b) in two_varied(1..50), w in 0.0f64..=1.0) {
        let s = EnsembleSpec::from_weight_a(w).unwrap();
        let ab = ensemble_predict(&preds(&a), &preds(&b), &s).unwrap();
        let ba = ensemble_predict(&preds(&b), &preds(&a), &s.swapped()).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x.score - y.score).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_choice_is_optimal((a, b) in two_varied(3..40), g in varied(40..41)) {
        let n = a.len();
        let golds = &g[..n];
        let spread = golds.iter().map(|x| (x - golds.iter().sum::<f64>() / n as f64).powi(2)).sum::<f64>();
        prop_assume!(spread > 1e-6);
        let grid = EnsembleSpec::default_grid();
        let (pa, pb) = (preds(&a), preds(&b));
        let score = |s: &EnsembleSpec| {
            let blend: Vec<f64> = ensemble_predict(&pa, &pb, s).unwrap().iter().map(|p| p.score).collect();
            pearson(&blend, golds)
        };
        // A blend can be constant (e.g. b = -4a at 0.8:0.2); such candidates are skipped.
        prop_assume!(grid.iter().all(|s| score(s).is_ok()));
        let chosen = grid_select_weight(&pa, &pb, golds, &grid).unwrap();
        let best = score(&chosen).unwrap();
        for s in &grid {
            prop_assert!(best + 1e-12 >= score(s).unwrap());
        }
    }

    #[test]
    fn error_report_is_sorted(g in prop::collection::vec(-3.0f64..3.0, 1..40), noise in prop::collection::vec(-2.0f64..2.0, 40), k in 1usize..50) {
        let pairs: Vec<QEPair> = g.iter().enumerate().map(|(index, &z)| QEPair { index, original: String::new(), translation: String::new(), da_score: None, z_score: z }).collect();
        let p: Vec<Prediction> = g.iter().zip(&noise).enumerate().map(|(index, (z, e))| Prediction { index, score: z + e }).collect();
        let r = error_report(&pairs, &p, k).unwrap();
        prop_assert_eq!(r.len(), k.min(g.len()));
        for w in r.windows(2) {
            prop_assert!(w[0].abs_diff >= w[1].abs_diff);
        }
        for c in &r {
            prop_assert_eq!(c.abs_diff, (c.gold - c.predicted).abs());
        }
    }

    #[test]
    fn augmentation_preserves_originals(n_train in 1usize..30, n in 0usize..50, seed in any::<u64>()) {
        let train: Vec<QEPair> = (0..n_train).map(|i| QEPair { index: i * 2, original: format!("o {i}"), translation: format!("t {i}"), da_score: Some(i as f64), z_score: i as f64 * 0.1 }).collect();
        let corpus: Vec<ParallelPair> = (0..60).map(|i| ParallelPair { source: format!("s{i}"), target: format!("g{i}") }).collect();
        let policy = AugmentPolicy { n_pairs: n, label_policy: LabelPolicy::MaxObservedZ, seed };
        let out = augment_dataset(&train, &corpus, &policy).unwrap();
        prop_assert_eq!(out.len(), n_train + n);
        prop_assert_eq!(&out[..n_train], &train[..]);
        let max = train.iter().map(|p| p.z_score).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out[n_train..].iter().all(|p| p.z_score == max));
        prop_assert_eq!(out, augment_dataset(&train, &corpus, &policy).unwrap());
    }
}
