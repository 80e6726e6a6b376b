use gaitrdae::eval::{average_precisions, distance_matrix, mean_average_precision, rank_k, DistanceMatrix};
use gaitrdae::tensor::{Graph, Tensor};
use gaitrdae::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::{brute_ap, brute_first_hit, brute_triplet};

fn random_instance(rng: &mut ChaCha8Rng) -> (DistanceMatrix, Vec<usize>, Vec<usize>) {
    let ids = 10;
    let mut gallery: Vec<usize> = (0..100).map(|i| i % ids).collect();
    gallery.shuffle(rng);
    let probes: Vec<usize> = (0..50).map(|_| rng.gen_range(0..ids)).collect();
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..100).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
    (DistanceMatrix::from_rows(&rows).unwrap(), probes, gallery)
}

#[test]
fn rank_and_map_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ks = [1, 5, 10, 20];
    for _ in 0..50 {
        let (d, probes, gallery) = random_instance(&mut rng);
        let ranks = rank_k(&d, &probes, &gallery, &ks, &None).unwrap();
        for (r, &k) in ranks.iter().zip(&ks) {
            let hits = (0..d.probes).filter(|&i| brute_first_hit(d.row(i), &gallery, probes[i]) < k).count();
            assert_eq!(*r, hits as f64 / d.probes as f64);
        }
        let aps = average_precisions(&d, &probes, &gallery, &None).unwrap();
        for (i, ap) in aps.iter().enumerate() {
            assert!((ap - brute_ap(d.row(i), &gallery, probes[i])).abs() < 1e-12);
        }
        let map = mean_average_precision(&d, &probes, &gallery, &None).unwrap();
        let want = (0..d.probes).map(|i| brute_ap(d.row(i), &gallery, probes[i])).sum::<f64>() / d.probes as f64;
        assert!((map - want).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_average_precision() {
    let d = DistanceMatrix::from_rows(&[vec![0.5, 0.1, 0.3]]).unwrap();
    let ap = average_precisions(&d, &["A"], &["A", "B", "A"], &None).unwrap()[0];
    assert!((ap - 0.583333).abs() < 1e-6);
    assert_eq!(ap, (0.5 + 2.0 / 3.0) / 2.0);
}

#[test]
fn rank_examples_and_protocol_errors() {
    let d = DistanceMatrix::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2]]).unwrap();
    assert_eq!(rank_k(&d, &["A", "B"], &["A", "B"], &[1], &None).unwrap(), vec![1.0]);
    let d = DistanceMatrix::from_rows(&[vec![0.1, 0.2]]).unwrap();
    assert_eq!(rank_k(&d, &["A"], &["B", "A"], &[1, 5], &None).unwrap(), vec![0.0, 1.0]);
    let err = rank_k(&d, &["C"], &["B", "A"], &[1], &None).unwrap_err();
    assert!(matches!(&err, Error::Protocol(m) if m.contains("C")), "{err}");
}

#[test]
fn map_is_invariant_under_monotone_transforms_and_gallery_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, probes, gallery) = random_instance(&mut rng);
    let map = mean_average_precision(&d, &probes, &gallery, &None).unwrap();
    let squashed: Vec<Vec<f64>> = (0..d.probes).map(|i| d.row(i).iter().map(|v| (v * 0.3).tanh()).collect()).collect();
    let d2 = DistanceMatrix::from_rows(&squashed).unwrap();
    assert!((mean_average_precision(&d2, &probes, &gallery, &None).unwrap() - map).abs() < 1e-12);

    let mut perm: Vec<usize> = (0..gallery.len()).collect();
    perm.shuffle(&mut rng);
    let rows: Vec<Vec<f64>> = (0..d.probes).map(|i| perm.iter().map(|&j| d.at(i, j)).collect()).collect();
    let g2: Vec<usize> = perm.iter().map(|&j| gallery[j]).collect();
    let d3 = DistanceMatrix::from_rows(&rows).unwrap();
    assert!((mean_average_precision(&d3, &probes, &g2, &None).unwrap() - map).abs() < 1e-12);
    assert_eq!(
        rank_k(&d3, &probes, &g2, &[1, 5], &None).unwrap(),
        rank_k(&d, &probes, &gallery, &[1, 5], &None).unwrap()
    );
}

#[test]
fn part_distances_average_over_parts() {
    let a = Tensor::new([1, 2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let b = Tensor::new([1, 2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
    assert_eq!(distance_matrix(&a, &b).unwrap().at(0, 0), 3.0);
}

#[test]
fn triplet_matches_triple_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50 {
        let (ids, k, p, c) = (rng.gen_range(2..5), rng.gen_range(2..4), rng.gen_range(1..4), rng.gen_range(1..6));
        let n = ids * k;
        let mut labels: Vec<usize> = (0..n).map(|i| i / k).collect();
        labels.shuffle(&mut rng);
        let scale = if trial % 2 == 0 { 0.1 } else { 1.0 };
        let x: Vec<f64> = (0..n * p * c).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new([n, p, c], x.clone()).unwrap());
        let (loss, stats) = g.triplet_loss(v, &labels, 0.2).unwrap();
        let want = brute_triplet(&x, n, p, c, &labels, 0.2);
        assert!((g.value(loss).item() - want).abs() <= 1e-12);
        assert!((stats.loss - want).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&stats.nonzero_fraction));
    }
}

#[test]
fn triplet_scalar_cases() {
    let loss = |x: Vec<f64>| {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new([4, 1, 1], x).unwrap());
        let (l, _) = g.triplet_loss(v, &[0, 0, 1, 1], 0.2).unwrap();
        g.value(l).item()
    };
    // d(A, P) = 0.5 and d(A, N) = 1 for every anchor
    assert_eq!(loss(vec![0.0, 0.5, -1.0, -1.5]), 0.0);
    // d(A, P) = d(A, N) = 1 for the only active triples
    assert_eq!(loss(vec![0.0, 1.0, -1.0, -1.0]), 0.2);
}

#[test]
fn cross_entropy_is_stable_for_huge_logits() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::new([1, 1, 2], vec![1000.0, 0.0]).unwrap());
    let (l, acc) = g.cross_entropy(v, &[0]).unwrap();
    let l = g.value(l).item();
    assert!(l.is_finite() && l.abs() < 1e-12, "{l}");
    assert_eq!(acc, 1.0);
    let mut g = Graph::<f32>::new();
    let v = g.constant(Tensor::new([1, 1, 2], vec![0.0f32, 1000.0]).unwrap());
    let (l, _) = g.cross_entropy(v, &[0]).unwrap();
    assert!((g.value(l).item() - 1000.0).abs() < 1e-3);
}

#[test]
fn cross_entropy_rejects_labels_out_of_range() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::zeros([1, 1, 2]));
    assert!(matches!(g.cross_entropy(v, &[2]), Err(Error::Usage(_))));
}
