use proptest::prelude::*;

use erclust_core::calibration::{transform_histogram, CountHistogram};
use erclust_core::er_graph::connectivity_curve;
use erclust_core::eval::{categorize_pairs, upp_upr, EvalTuple};
use erclust_core::io::{decode_binary_features, encode_binary_features, parse_csv_features};
use erclust_core::linkage::{
    cluster_scores, constrained_single_linkage, scores_to_dissimilarity, transitive_closure, LinkageAlgorithm,
};
use erclust_core::similarity::{directed_exact, rank1_all_pairs_fast, rank1_all_pairs_naive};
use erclust_core::{ConstraintSet, FeatureMatrix, GallerySet, PairScoreTable, RngSpec, ScoreMode};

fn matrix(rows: usize, dims: usize, levels: u32) -> impl Strategy<Value = FeatureMatrix> {
    prop::collection::vec(0..levels, rows * dims)
        .prop_map(move |v| FeatureMatrix::new(rows, dims, v.into_iter().map(f64::from).collect()).unwrap())
}

fn instance() -> impl Strategy<Value = (FeatureMatrix, FeatureMatrix)> {
    (2usize..12, 1usize..10, 1usize..6, 2u32..8)
        .prop_flat_map(|(n, f, g, levels)| (matrix(n, f, levels), matrix(g, f, levels)))
}

fn score_table() -> impl Strategy<Value = (PairScoreTable, Vec<(usize, usize)>)> {
    (2usize..24).prop_flat_map(|n| {
        let pairs = n * (n - 1) / 2;
        (
            prop::collection::vec(0u32..=16, pairs),
            prop::collection::vec((0..n, 0..n), 0..n),
        )
            .prop_map(move |(scores, cons)| {
                let mut it = scores.into_iter();
                let table = PairScoreTable::from_fn(n, |_, _| f64::from(it.next().unwrap()));
                (table, cons)
            })
    })
}

fn constraint_set(pairs: &[(usize, usize)]) -> ConstraintSet {
    pairs.iter().filter(|(a, b)| a != b).copied().collect()
}

fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

proptest! {
    #[test]
    fn fast_path_matches_naive((feats, gallery) in instance()) {
        let gal = GallerySet::fixed(gallery.clone());
        let fast = rank1_all_pairs_fast(&feats, &gal, ScoreMode::ExactFixedGallery).unwrap();
        let naive = rank1_all_pairs_naive(&feats, &gal, ScoreMode::ExactFixedGallery).unwrap();
        prop_assert_eq!(fast.scores(), naive.scores());

        let avg = GallerySet::with_super_gallery(gallery.clone(), gallery.clone(), gallery.n_items()).unwrap();
        let fast = rank1_all_pairs_fast(&feats, &avg, ScoreMode::AveragedGallery).unwrap();
        let naive = rank1_all_pairs_naive(&feats, &avg, ScoreMode::AveragedGallery).unwrap();
        for (a, b) in fast.scores().iter().zip(naive.scores()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn scores_are_bounded_and_symmetric((feats, gallery) in instance()) {
        let f = feats.n_dims() as f64;
        let table = rank1_all_pairs_fast(&feats, &GallerySet::fixed(gallery.clone()), ScoreMode::ExactFixedGallery).unwrap();
        for (i, j, s) in table.iter() {
            prop_assert!((0.0..=f).contains(&s));
            let ab = directed_exact(feats.row(i), feats.row(j), &gallery);
            let ba = directed_exact(feats.row(j), feats.row(i), &gallery);
            prop_assert_eq!(s, f64::from(ab.max(ba)));
        }
    }

    #[test]
    fn growing_the_gallery_never_raises_counts(
        (feats, gallery) in instance(),
        extra in prop::collection::vec(0u32..8, 1..20),
    ) {
        let f = feats.n_dims();
        let mut values = gallery.values().to_vec();
        let rows = extra.len() / f;
        prop_assume!(rows > 0);
        values.extend(extra[..rows * f].iter().map(|&v| f64::from(v)));
        let bigger = FeatureMatrix::new(gallery.n_items() + rows, f, values).unwrap();
        for i in 0..feats.n_items() {
            for j in 0..feats.n_items() {
                if i != j {
                    prop_assert!(
                        directed_exact(feats.row(i), feats.row(j), &bigger)
                            <= directed_exact(feats.row(i), feats.row(j), &gallery)
                    );
                }
            }
        }
    }

    #[test]
    fn linkage_variants_agree((table, cons) in score_table(), tau in -1.0f64..17.0) {
        let cs = constraint_set(&cons);
        let d = scores_to_dissimilarity(&table, 16.0, &cs).unwrap();
        let (fast, fast_trace) = constrained_single_linkage(&d, 16.0 - tau, LinkageAlgorithm::Fast).unwrap();
        let (naive, naive_trace) = constrained_single_linkage(&d, 16.0 - tau, LinkageAlgorithm::Naive).unwrap();
        prop_assert_eq!(fast.assignment(), naive.assignment());
        prop_assert_eq!(fast_trace, naive_trace);
        prop_assert!(fast.violations().is_empty());
    }

    #[test]
    fn unconstrained_linkage_is_transitive_closure((table, _) in score_table(), tau in -1.0f64..17.0) {
        let (c, _) = cluster_scores(&table, 16.0, &ConstraintSet::new(), tau, LinkageAlgorithm::Fast).unwrap();
        prop_assert_eq!(canonical(c.assignment()), canonical(transitive_closure(&table, tau).assignment()));
    }

    #[test]
    fn linkage_is_permutation_equivariant(
        n in 2usize..16,
        seed in any::<u64>(),
        tau in 0.0f64..1.0,
    ) {
        // Distinct continuous scores: no ties, so the partition is unique.
        use rand::{Rng, seq::SliceRandom};
        let mut r = RngSpec::new(seed).rng();
        let table = PairScoreTable::from_fn(n, |_, _| r.random::<f64>());
        let cs: ConstraintSet = (0..n / 2)
            .map(|_| (r.random_range(0..n), r.random_range(0..n)))
            .filter(|(a, b)| a != b)
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permuted = PairScoreTable::from_fn(n, |i, j| table.get(perm[i], perm[j]));
        let pcs: ConstraintSet = cs
            .iter()
            .map(|(a, b)| {
                let pa = perm.iter().position(|&p| p == a).unwrap();
                let pb = perm.iter().position(|&p| p == b).unwrap();
                (pa, pb)
            })
            .collect();
        let (c, _) = cluster_scores(&table, 1.0, &cs, tau, LinkageAlgorithm::Fast).unwrap();
        let (pc, _) = cluster_scores(&permuted, 1.0, &pcs, tau, LinkageAlgorithm::Fast).unwrap();
        let back: Vec<usize> = (0..n)
            .map(|item| pc.cluster_of(perm.iter().position(|&p| p == item).unwrap()))
            .collect();
        prop_assert_eq!(canonical(c.assignment()), canonical(&back));
    }

    #[test]
    fn binary_features_round_trip(rows in 1usize..6, dims in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = RngSpec::new(seed).rng();
        // f32-representable values survive the f32 payload exactly.
        let v: Vec<f64> = (0..rows * dims).map(|_| f64::from(r.random::<f32>() * 100.0 - 50.0)).collect();
        let m = FeatureMatrix::new(rows, dims, v).unwrap();
        prop_assert_eq!(&decode_binary_features(&encode_binary_features(&m)).unwrap(), &m);
        let csv: String = (0..rows)
            .map(|i| m.row(i).iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        prop_assert_eq!(&parse_csv_features(csv.as_bytes(), "t").unwrap(), &m);
    }

    #[test]
    fn categories_partition_all_pairs(
        kinds in prop::collection::vec((0u8..3, 0usize..4, 0usize..4), 1..40),
    ) {
        let tuples: Vec<EvalTuple> = kinds
            .iter()
            .map(|&(k, id, c)| match k {
                0 => EvalTuple::false_positive(c),
                1 => EvalTuple::valid(format!("p{id}"), c),
                _ => EvalTuple::false_negative(format!("p{id}")),
            })
            .collect();
        let t = tuples.len() as u64;
        let fp = kinds.iter().filter(|k| k.0 == 0).count() as u64;
        let fnn = kinds.iter().filter(|k| k.0 == 2).count() as u64;
        let counts = categorize_pairs(&tuples).unwrap();
        prop_assert_eq!(counts.total(), t * (t - 1) / 2 + fp + fnn);
    }

    #[test]
    fn extra_failures_degrade_metrics(
        labels in prop::collection::vec((0usize..3, 0usize..3), 2..30),
        cluster in 0usize..3,
        id in 0usize..3,
    ) {
        let mut tuples: Vec<EvalTuple> = labels.iter().map(|&(i, c)| EvalTuple::valid(format!("p{i}"), c)).collect();
        let base = categorize_pairs(&tuples).unwrap();
        prop_assume!(base.white > 0);
        let (upp, upr) = upp_upr(&base).unwrap();

        tuples.push(EvalTuple::false_positive(cluster));
        let (upp_fp, _) = upp_upr(&categorize_pairs(&tuples).unwrap()).unwrap();
        prop_assert!(upp_fp < upp);
        tuples.pop();

        prop_assume!(labels.iter().any(|&(i, _)| i == id));
        tuples.push(EvalTuple::false_negative(format!("p{id}")));
        let (_, upr_fn) = upp_upr(&categorize_pairs(&tuples).unwrap()).unwrap();
        prop_assert!(upr_fn < upr);
    }

    #[test]
    fn transform_conserves_mass(
        bins in prop::collection::vec(0u32..50, 2..60),
        s in 0.5f64..2.0,
        t in -8.0f64..8.0,
    ) {
        let h = CountHistogram::from_bins(1.0, bins.into_iter().map(f64::from).collect()).unwrap();
        let out = transform_histogram(&h, s, t, 1.0, h.n_bins());
        prop_assert!((out.iter().sum::<f64>() - h.total()).abs() <= 1e-9 * h.total().max(1.0));
    }

    #[test]
    fn connectivity_is_monotone_in_p(n in 2usize..12, seed in any::<u64>()) {
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let c = connectivity_curve(n, &grid, 50, &RngSpec::new(seed)).unwrap();
        prop_assert!(c.prob_connected.windows(2).all(|w| w[0] <= w[1]));
    }
}
