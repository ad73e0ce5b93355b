use grood::nearest_mean::{fit_nm, similarity_from_distance};
use grood::{EmbeddingRecord, EmbeddingSet};
use proptest::prelude::*;

fn records_strategy() -> impl Strategy<Value = Vec<(i32, Vec<f32>)>> {
    prop::collection::vec(
        (
            0i32..3,
            prop::collection::vec((-3200i32..3200).prop_map(|v| v as f32 / 64.0), 3),
        ),
        6..40,
    )
    .prop_filter("every class present", |r| {
        (0..3).all(|k| r.iter().any(|(l, _)| *l == k))
    })
}

fn to_set(records: &[(i32, Vec<f32>)]) -> EmbeddingSet {
    EmbeddingSet::new(
        3,
        records
            .iter()
            .map(|(l, v)| EmbeddingRecord::new(*l, v.clone()))
            .collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn similarity_strictly_decreasing(a in 0.0f64..1e6, gap in 1e-6f64..1e3) {
        prop_assert!(similarity_from_distance(a) > similarity_from_distance(a + gap));
    }

    #[test]
    fn best_similarity_is_nearest_mean(
        records in records_strategy(),
        x in prop::collection::vec(-60.0f64..60.0, 3),
    ) {
        let model = fit_nm(&to_set(&records)).unwrap();
        let d = model.distances(&x).unwrap();
        let s = model.similarities(&x).unwrap();
        let argmin = (0..d.len()).fold(0, |b, k| if d[k] < d[b] { k } else { b });
        let argmax = (0..s.len()).fold(0, |b, k| if s[k] > s[b] { k } else { b });
        prop_assert_eq!(argmin, argmax);
        prop_assert_eq!(model.predict(&x).unwrap(), argmin);
    }

    #[test]
    fn translation_leaves_distances_unchanged(
        records in records_strategy(),
        x in prop::collection::vec(-60.0f64..60.0, 3),
        shift in prop::collection::vec(-20i32..20, 3),
    ) {
        // inputs are multiples of 1/64, so integer shifts stay exact in f32
        let shifted: Vec<(i32, Vec<f32>)> = records
            .iter()
            .map(|(l, v)| (*l, v.iter().zip(&shift).map(|(a, s)| a + *s as f32).collect()))
            .collect();
        let xs: Vec<f64> = x.iter().zip(&shift).map(|(a, s)| a + *s as f64).collect();
        let before = fit_nm(&to_set(&records)).unwrap();
        let after = fit_nm(&to_set(&shifted)).unwrap();
        let d0 = before.distances(&x).unwrap();
        let d1 = after.distances(&xs).unwrap();
        for (a, b) in d0.iter().zip(&d1) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
        prop_assert_eq!(before.predict(&x).unwrap(), after.predict(&xs).unwrap());
    }

    #[test]
    fn record_order_does_not_change_means(
        records in records_strategy(),
        perm_seed in any::<u64>(),
    ) {
        let mut permuted = records.clone();
        let mut state = perm_seed;
        for i in (1..permuted.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            permuted.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = fit_nm(&to_set(&records)).unwrap();
        let b = fit_nm(&to_set(&permuted)).unwrap();
        for k in 0..3 {
            for (x, y) in a.mean(k).iter().zip(b.mean(k)) {
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }
    }
}
