//! Property tests for the structural invariants the rest of the system
//! leans on: semaphore algebra, partition bookkeeping, cost identities,
//! ranking-metric invariances, fold stratification, and file round trips.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, Axis};
use proptest::prelude::*;

use xae::cost::{cost, kl_sparsity, kl_sparsity_prime, Hyperparams};
use xae::data::{load_patches, save_patches, PatchDataset};
use xae::labels::{semaphore, LabelSet, PartitionSpec, SegmentSpec};
use xae::metrics::{evaluate_scores, from_confusion};
use xae::model::XaeModel;

fn label_ids() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(0u32..12, 0..8)
}

/// a within `tol` of b, relative to the larger magnitude.
fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn semaphore_is_symmetric_and_matches_set_intersection(a in label_ids(), b in label_ids()) {
        let s = LabelSet::new(a.iter().copied());
        let t = LabelSet::new(b.iter().copied());
        let sa: BTreeSet<u32> = a.iter().copied().collect();
        let sb: BTreeSet<u32> = b.iter().copied().collect();
        let expect = u8::from(sa.intersection(&sb).next().is_some());
        prop_assert_eq!(semaphore(&s, &t), expect);
        prop_assert_eq!(semaphore(&s, &t), semaphore(&t, &s));
        if !s.is_empty() {
            prop_assert_eq!(semaphore(&s, &s), 1);
        }
    }

    #[test]
    fn kl_sparsity_is_a_divergence_in_rho_hat(
        rho in 0.01f64..0.99,
        rho_hat in 0.01f64..0.99,
    ) {
        let kl = kl_sparsity(rho, rho_hat);
        prop_assert!(kl >= 0.0, "kl({rho}, {rho_hat}) = {kl} < 0");
        prop_assert_eq!(kl_sparsity(rho, rho), 0.0);
        if (rho_hat - rho).abs() > 1e-6 {
            prop_assert!(kl > 0.0, "kl({rho}, {rho_hat}) = {kl} not positive");
        }
        // The derivative pushes rho_hat back toward rho.
        let d = kl_sparsity_prime(rho, rho_hat);
        if rho_hat > rho + 1e-9 {
            prop_assert!(d > 0.0, "prime({rho}, {rho_hat}) = {d}");
        }
        if rho_hat < rho - 1e-9 {
            prop_assert!(d < 0.0, "prime({rho}, {rho_hat}) = {d}");
        }
    }
}

/// Universe 0..u, a nested pair of source groups, and random segments.
fn nested_group_partition() -> impl Strategy<Value = (PartitionSpec, LabelSet, LabelSet)> {
    (2u32..8).prop_flat_map(|u| {
        let subset = proptest::collection::btree_set(0u32..u, 1..=u as usize);
        (subset.clone(), subset, proptest::collection::vec((proptest::collection::btree_set(0u32..u, 1..=u as usize), 1usize..4), 1..5))
            .prop_filter_map("small ⊆ big", move |(big, seed_small, segs)| {
                // Intersect to force small ⊆ big; drop draws that empty it.
                let small: BTreeSet<u32> = seed_small.intersection(&big).copied().collect();
                if small.is_empty() {
                    return None;
                }
                let big_set = LabelSet::new(big.iter().copied());
                let small_set = LabelSet::new(small.iter().copied());
                let segments: Vec<SegmentSpec> = segs
                    .into_iter()
                    .map(|(labels, width)| SegmentSpec {
                        labels: LabelSet::new(labels.iter().copied()),
                        width,
                    })
                    .collect();
                let spec = PartitionSpec::new(
                    LabelSet::new(0..u),
                    vec![small_set.clone(), big_set.clone()],
                    segments,
                )
                .expect("all parts nonempty and inside the universe");
                Some((spec, small_set, big_set))
            })
    })
}

proptest! {
    #[test]
    fn active_segments_grow_with_the_source_group((spec, small, big) in nested_group_partition()) {
        let on_small = spec.active_segments(&small)?;
        let on_big = spec.active_segments(&big)?;
        prop_assert!(on_small.windows(2).all(|w| w[0] < w[1]), "not strictly increasing");
        let big_set: BTreeSet<usize> = on_big.iter().copied().collect();
        for j in &on_small {
            prop_assert!(big_set.contains(j), "segment {j} active for the subset only");
        }
        // A group intersecting every segment activates every segment.
        if small == *spec.universe() {
            prop_assert_eq!(on_small.len(), spec.segments().len());
        }
    }

    #[test]
    fn segment_ranges_tile_the_hidden_layer(widths in proptest::collection::vec(1usize..6, 1..6)) {
        let universe = LabelSet::new(0..widths.len() as u32);
        let segments: Vec<SegmentSpec> = widths
            .iter()
            .enumerate()
            .map(|(i, &width)| SegmentSpec { labels: LabelSet::new([i as u32]), width })
            .collect();
        let spec = PartitionSpec::new(universe.clone(), vec![universe], segments)?;
        let mut cursor = 0usize;
        for (j, &width) in widths.iter().enumerate() {
            let range = spec.segment_range(j);
            prop_assert_eq!(range.start, cursor);
            prop_assert_eq!(range.end, cursor + width);
            prop_assert_eq!(spec.segment_offset(j), cursor);
            cursor += width;
        }
        prop_assert_eq!(spec.total_width(), cursor);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cost_is_invariant_under_batch_duplication(
        seed in any::<u64>(),
        input_dim in 3usize..8,
        widths in proptest::collection::vec(1usize..3, 3),
        rows in proptest::collection::vec(
            proptest::collection::vec(0.0f64..1.0, 3..6),
            2,
        ),
    ) {
        // The worked three-digit layout: groups {0,1} and {1,2}.
        let segments: Vec<SegmentSpec> = widths
            .iter()
            .enumerate()
            .map(|(i, &width)| SegmentSpec { labels: LabelSet::new([i as u32]), width })
            .collect();
        let spec = PartitionSpec::new(
            LabelSet::new(0..3),
            vec![LabelSet::new([0, 1]), LabelSet::new([1, 2])],
            segments,
        )?;
        let model = XaeModel::init(spec, input_dim, seed)?;
        let hp = Hyperparams::default_mnist_toy();

        let to_matrix = |flat: &Vec<f64>| {
            let k = flat.len();
            Array2::from_shape_fn((k, input_dim), |(r, c)| {
                // Cheap deterministic fill derived from the drawn row values.
                (flat[r] + 0.13 * c as f64).fract()
            })
        };
        let x0 = to_matrix(&rows[0]);
        let x1 = to_matrix(&rows[1]);
        let d0 = concatenate(Axis(0), &[x0.view(), x0.view()]).unwrap();
        let d1 = concatenate(Axis(0), &[x1.view(), x1.view()]).unwrap();

        let once = cost(&model, &[(0, x0.view()), (1, x1.view())], &hp)?;
        let twice = cost(&model, &[(0, d0.view()), (1, d1.view())], &hp)?;
        for (name, a, b) in [
            ("recon", once.recon, twice.recon),
            ("decay", once.decay, twice.decay),
            ("sparsity", once.sparsity, twice.sparsity),
            ("gaussianity", once.gaussianity, twice.gaussianity),
            ("decorrelation", once.decorrelation, twice.decorrelation),
            ("total", once.total, twice.total),
        ] {
            prop_assert!(close(a, b, 1e-11), "{name}: {a} vs {b}");
        }
    }

    #[test]
    fn ranking_metrics_ignore_positive_rescaling(
        truth in proptest::collection::vec(0usize..3, 4..30),
        cells in proptest::collection::vec(0.0f64..1.0, 90),
        positive in proptest::option::of(0usize..3),
    ) {
        let n = truth.len();
        let scores = Array2::from_shape_fn((n, 3), |(r, c)| cells[r * 3 + c]);
        // Power-of-two scaling is exact on floats, so ranks and ties
        // survive bit-for-bit and every ranking metric must too.
        let scaled = scores.mapv(|v| v * 4.0);
        let names: Vec<String> = ["low", "mid", "high"].map(String::from).to_vec();

        let a = evaluate_scores(&truth, scores.view(), &names, positive)?;
        let b = evaluate_scores(&truth, scaled.view(), &names, positive)?;
        prop_assert_eq!(a.confusion, b.confusion);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.weighted_f, b.weighted_f);
        prop_assert_eq!(a.primary_f, b.primary_f);
        prop_assert_eq!(a.macro_auc, b.macro_auc);
        for (ca, cb) in a.per_class.iter().zip(&b.per_class) {
            prop_assert_eq!(ca.auc, cb.auc);
            prop_assert_eq!(ca.average_precision, cb.average_precision);
        }
    }

    #[test]
    fn weighted_f_stays_between_the_class_extremes(
        c in 2usize..5,
        cells in proptest::collection::vec(0usize..30, 25),
    ) {
        let mut confusion = Array2::from_shape_fn((c, c), |(r, k)| cells[r * 5 + k]);
        for k in 0..c {
            confusion[[k, k]] = confusion[[k, k]].max(1); // every class has support
        }
        let names: Vec<String> = (0..c).map(|k| format!("class{k}")).collect();
        let report = from_confusion(confusion, &names, None)?;
        let lo = report.per_class.iter().map(|m| m.f_score).fold(f64::INFINITY, f64::min);
        let hi = report.per_class.iter().map(|m| m.f_score).fold(0.0, f64::max);
        prop_assert!(
            report.weighted_f >= lo - 1e-12 && report.weighted_f <= hi + 1e-12,
            "weighted {} outside [{lo}, {hi}]",
            report.weighted_f
        );
    }

    #[test]
    fn stratified_folds_partition_without_skew(
        counts in proptest::collection::vec(2usize..9, 2..4),
        k in 2usize..5,
        seed in any::<u64>(),
    ) {
        let names: Vec<String> = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        prop_assume!(labels.len() >= k);
        let folds = xae::classifier::stratified_folds(&labels, &names, k, seed)?;
        prop_assert_eq!(folds.len(), k);

        // Disjoint and complete.
        let mut seen: Vec<usize> = folds.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());

        // Global sizes and per-class counts are balanced within one.
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for class in 0..names.len() {
            let per: Vec<usize> = folds
                .iter()
                .map(|f| f.iter().filter(|&&i| labels[i] == class).count())
                .collect();
            prop_assert!(
                per.iter().max().unwrap() - per.iter().min().unwrap() <= 1,
                "class {class} spread {per:?}"
            );
        }
    }

    #[test]
    fn patch_file_round_trip_is_lossless(
        channels in 1usize..3,
        height in 1usize..5,
        width in 1usize..5,
        labels in proptest::collection::vec(0u32..3, 1..10),
        seed_cells in proptest::collection::vec(0.0f32..1.0, 9 * 2 * 4 * 4),
    ) {
        let table: BTreeMap<u32, String> =
            (0..3).map(|i| (i, format!("name{i}"))).collect();
        let dim = channels * height * width;
        let mut ds = PatchDataset::new(channels, height, width, table)?;
        for (k, &label) in labels.iter().enumerate() {
            ds.push(label, &seed_cells[k * dim..(k + 1) * dim])?;
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.xpd");
        save_patches(&ds, &path)?;
        let back = load_patches(&path)?;

        prop_assert_eq!(back.len(), ds.len());
        prop_assert_eq!(back.geometry(), ds.geometry());
        prop_assert_eq!(back.table(), ds.table());
        for k in 0..ds.len() {
            prop_assert_eq!(back.label_of(k), ds.label_of(k));
            prop_assert_eq!(back.values_of(k), ds.values_of(k));
        }
    }
}
