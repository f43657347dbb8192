use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsda::data::{circular_shift, load_dataset, save_dataset, Dataset, DatasetMeta, Domain, TimeSeriesSample};
use tsda::dtw::{dtw_brute_force, dtw_distance, path_cost};
use tsda::losses::{hinge, mine_triplets};
use tsda::model::{num_patches, patchify};
use tsda::tensor::{Graph, Tensor};

fn seq(max_len: usize, width: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, width), 1..=max_len)
}

proptest! {
    #[test]
    fn dtw_matches_brute_force(a in seq(6, 3), b in seq(6, 3)) {
        let fast = dtw_distance(&a, &b).unwrap();
        let brute = dtw_brute_force(&a, &b).unwrap();
        prop_assert!((fast.distance - brute.distance).abs() <= 1e-9);
        prop_assert!((path_cost(&a, &b, &fast.path) - fast.distance).abs() <= 1e-9);
    }

    #[test]
    fn dtw_is_symmetric_and_non_negative(a in seq(10, 2), b in seq(10, 2)) {
        let ab = dtw_distance(&a, &b).unwrap().distance;
        let ba = dtw_distance(&b, &a).unwrap().distance;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert_eq!(dtw_distance(&a, &a).unwrap().distance, 0.0);
    }

    #[test]
    fn dtw_path_is_monotone_and_contiguous(a in seq(12, 2), b in seq(12, 2)) {
        let path = dtw_distance(&a, &b).unwrap().path;
        prop_assert_eq!(path[0], (0, 0));
        prop_assert_eq!(*path.last().unwrap(), (a.len() - 1, b.len() - 1));
        for w in path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            prop_assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
        }
    }

    #[test]
    fn repeating_elements_costs_nothing(a in seq(8, 3), reps in prop::collection::vec(0usize..8, 1..5)) {
        let mut b = a.clone();
        for r in reps {
            let i = r % b.len();
            b.insert(i, b[i].clone());
        }
        prop_assert_eq!(dtw_distance(&a, &b).unwrap().distance, 0.0);
    }

    #[test]
    fn patches_cover_every_step(t in 1usize..200, p_frac in 0.0f64..1.0, s_frac in 0.0f64..1.0) {
        let p = 1 + ((t - 1) as f64 * p_frac) as usize;
        let s = 1 + ((p - 1) as f64 * s_frac) as usize;
        let m = num_patches(t, p, s);
        let values: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let seq = patchify(&values, t, 1, p, s).unwrap();
        prop_assert_eq!(seq.num_patches, m);
        prop_assert_eq!(seq.patches.len(), m * p);
        let mut seen = vec![false; t];
        seq.patches.iter().for_each(|&v| seen[v as usize] = true);
        prop_assert!(seen.iter().all(|&x| x));
        if (t - p).is_multiple_of(s) {
            prop_assert_eq!(m, (t - p) / s + 1);
        }
        // Only the final window may start past the last full-window start.
        prop_assert!((m - 1) * s < t);
    }

    #[test]
    fn circular_shift_inverts(t in 1usize..40, d in 1usize..4, shift in -60isize..60) {
        let values: Vec<f64> = (0..t * d).map(|i| i as f64).collect();
        let there = circular_shift(&values, t, d, shift);
        prop_assert_eq!(circular_shift(&there, t, d, -shift), values.clone());
        prop_assert_eq!(circular_shift(&values, t, d, shift + t as isize), there);
    }

    #[test]
    fn softmax_rows_are_distributions(x in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![3, 4], x).unwrap());
        let s = g.softmax(v);
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn hinge_is_non_negative_and_monotone(p in 0.0f64..10.0, n in 0.0f64..10.0, m in 0.01f64..5.0) {
        prop_assert!(hinge(p, n, m) >= 0.0);
        prop_assert!(hinge(p + 1.0, n, m) >= hinge(p, n, m));
        prop_assert!(hinge(p, n + 1.0, m) <= hinge(p, n, m));
    }

    #[test]
    fn mined_triplets_are_valid(labels in prop::collection::vec(0usize..4, 0..40), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = mine_triplets(&labels, &mut rng);
        prop_assert!(t.validate(&labels).is_ok());
        for i in 0..t.len() {
            prop_assert!(t.anchor[i] != t.positive[i]);
        }
    }

    #[test]
    fn dataset_round_trip(t in 1usize..20, d in 1usize..4, n in 1usize..12, seed in 0u64..100) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| TimeSeriesSample {
                values: (0..t * d).map(|_| rng.gen_range(-3.0f32..3.0) as f64).collect(),
                label: if i % 3 == 2 { None } else { Some(i % 2) },
                domain: Domain::Target,
            })
            .collect();
        let ds = Dataset::new(DatasetMeta::new(t, d, 2, Domain::Target), samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
