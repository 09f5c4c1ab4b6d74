//! Property tests for the format and metric invariants.

use proptest::prelude::*;

use semaug::archive::TensorArchive;
use semaug::augment::{apply_augmentation, pool_augmentation};
use semaug::detector::BBox;
use semaug::eval::{average_precision, iou};
use semaug::prompt::{merge_synonyms, MergeSpec, WordList};
use semaug::tensor::{FeatureMap, Tensor};

fn arb_bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BBox {
        x_min: x,
        y_min: y,
        x_max: x + w,
        y_max: y + h,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn archive_round_trip_is_bit_exact(data in prop::collection::vec(-1e6f32..1e6, 1..64)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsa");
        let mut a = TensorArchive::new();
        let t = Tensor::<f32>::from_vec(&[data.len()], data).unwrap();
        a.push("x", &t).unwrap();
        a.write_to(&path).unwrap();
        let b = TensorArchive::read_from(&path).unwrap();
        prop_assert_eq!(&a, &b);
        let path2 = dir.path().join("u.tnsa");
        b.write_to(&path2).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_bbox(), b in arb_bbox()) {
        let ab = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - iou(&b, &a)).abs() < 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_depends_on_rank_only(
        flags in prop::collection::vec(any::<bool>(), 1..20),
        n_extra_gt in 0usize..5,
    ) {
        // strictly decreasing scores, then a strictly monotone transform
        let n_tp = flags.iter().filter(|v| **v).count();
        let n_gt = n_tp + n_extra_gt;
        let scored: Vec<(f64, bool)> = flags
            .iter()
            .enumerate()
            .map(|(i, &tp)| (1.0 - i as f64 * 0.01, tp))
            .collect();
        let transformed: Vec<(f64, bool)> = scored
            .iter()
            .map(|&(s, tp)| (s * s * 3.0 + 1.0, tp))
            .collect();
        let a1 = average_precision(&scored, n_gt);
        let a2 = average_precision(&transformed, n_gt);
        prop_assert!((a1 - a2).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a1));
        // a trailing low-score false positive never increases ap
        let mut with_fp = scored.clone();
        with_fp.push((0.0, false));
        prop_assert!(average_precision(&with_fp, n_gt) <= a1 + 1e-12);
    }

    #[test]
    fn merge_output_never_contains_replaced_or_dropped_words(
        words in prop::collection::vec("[a-e]{1,3}", 1..20),
        replace_keys in prop::collection::vec("[a-e]{1,3}", 0..4),
        drops in prop::collection::vec("[a-e]{1,3}", 0..4),
    ) {
        let mut spec = MergeSpec::default();
        for k in &replace_keys {
            if !drops.contains(k) && k != "zz" {
                spec.replace_map.insert(k.clone(), "zz".to_string());
            }
        }
        for d in &drops {
            spec.drop_set.insert(d.clone());
        }
        if spec.validate().is_err() {
            return Ok(());
        }
        let list = WordList::new(words.into_iter(), "p");
        let merged = merge_synonyms(&list, &spec);
        for w in &merged.words {
            prop_assert!(!spec.drop_set.contains(w), "dropped word {w} survived");
            prop_assert!(
                !spec.replace_map.contains_key(w),
                "replace key {w} survived"
            );
        }
        // idempotent on its own output
        let again = merge_synonyms(&merged, &spec);
        prop_assert_eq!(&again.words, &merged.words);
    }

    #[test]
    fn pooled_application_shifts_channel_means_exactly(
        h in 1usize..5,
        w in 1usize..5,
        vals in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let c = vals.len();
        let fm = FeatureMap::from_vec(
            h,
            w,
            c,
            (0..h * w * c).map(|i| (i % 17) as f64 * 0.1 - 0.8).collect(),
        )
        .unwrap();
        let shifted = apply_augmentation(&fm, &vals).unwrap();
        let before = pool_augmentation(&fm);
        let after = pool_augmentation(&shifted);
        for ((b, a), v) in before.iter().zip(&after).zip(&vals) {
            prop_assert!((a - (b + v)).abs() < 1e-9);
        }
    }
}
