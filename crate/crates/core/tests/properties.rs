use gaitrdae::blocks::aggregate::aggregate_adaptive;
use gaitrdae::eval::{mean_average_precision, rank_k, DistanceMatrix};
use gaitrdae::tensor::{Graph, Tensor, Unary};
use proptest::prelude::*;

fn series_and_offsets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|len| {
        (
            prop::collection::vec(-10.0f64..10.0, len),
            prop::collection::vec(-(len as f64)..len as f64, len),
        )
    })
}

proptest! {
    #[test]
    fn aggregation_is_a_convex_combination((f, dt) in series_and_offsets()) {
        let len = f.len();
        let ft = Tensor::new([1, 1, len, 1, 1], f.clone()).unwrap();
        let dtt = Tensor::new([1, 1, len, 1, 1], dt).unwrap();
        let out = aggregate_adaptive(&ft, &dtt).unwrap();
        let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        let shifted = Tensor::new([1, 1, len, 1, 1], f.iter().map(|v| v + 3.0).collect()).unwrap();
        let out2 = aggregate_adaptive(&shifted, &dtt).unwrap();
        for (a, b) in out.data().iter().zip(out2.data()) {
            prop_assert!((b - a - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_is_monotone_and_scores_are_fractions(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..8),
        labels in prop::collection::vec(0usize..3, 1..8),
    ) {
        let gallery: Vec<usize> = (0..12).map(|j| j % 3).collect();
        let n = rows.len().min(labels.len());
        let d = DistanceMatrix::from_rows(&rows[..n]).unwrap();
        let probes = &labels[..n];
        let r = rank_k(&d, probes, &gallery, &[1, 2, 5, 12], &None).unwrap();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[3], 1.0);
        let map = mean_average_precision(&d, probes, &gallery, &None).unwrap();
        prop_assert!((0.0..=1.0).contains(&map));
    }

    #[test]
    fn broadcasting_matches_explicit_expansion(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        let mut g = Graph::<f64>::new();
        let av = g.constant(Tensor::new([3, 1], a.clone()).unwrap());
        let bv = g.constant(Tensor::new([1, 4], b.clone()).unwrap());
        let s = g.mul(av, bv).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                prop_assert_eq!(g.data(s)[i * 4 + j], a[i] * b[j]);
            }
        }
    }

    #[test]
    fn softplus_and_sigmoid_stay_finite(x in -1e4f64..1e4) {
        prop_assert!(Unary::Softplus.apply(x).is_finite());
        let s = Unary::Sigmoid.apply(x);
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
