use calibra::metrics::{auc, classification_metrics, dice, iou, macro_auc};
use proptest::prelude::*;

/// Count every (positive, negative) pair: 1 if ordered, 1/2 if tied.
fn pair_count_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0usize);
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    for &si in &pos {
        for &sj in &neg {
            pairs += 1;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

fn scored_labels() -> impl Strategy<Value = Vec<(f64, bool)>> {
    // coarse scores so ties are common
    prop::collection::vec(((0u8..20).prop_map(|v| v as f64 / 20.0), any::<bool>()), 2..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn auc_matches_pair_counting(data in scored_labels()) {
        let (scores, pos): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
        match (auc(&scores, &pos), pair_count_auc(&scores, &pos)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn dice_iou_identity(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let (d, j) = (dice(&a, &b), iou(&a, &b));
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        let (na, nb): (Vec<bool>, Vec<bool>) = (a.iter().map(|v| !v).collect(), b.iter().map(|v| !v).collect());
        let (d, j) = (dice(&na, &nb), iou(&na, &nb));
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn metrics_ignore_sample_order(
        rows in prop::collection::vec((prop::array::uniform3(0.0..1.0f64), 0usize..3), 3..40),
        rotate in 0usize..40,
    ) {
        let (probs, labels): (Vec<[f64; 3]>, Vec<usize>) = rows.iter().cloned().unzip();
        let mut shuffled = rows.clone();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (p2, l2): (Vec<[f64; 3]>, Vec<usize>) = shuffled.into_iter().unzip();
        let a = classification_metrics(&probs, &labels).unwrap();
        let b = classification_metrics(&p2, &l2).unwrap();
        prop_assert_eq!(a.confusion, b.confusion);
        prop_assert!((a.sensitivity - b.sensitivity).abs() <= 1e-12);
        prop_assert!((a.specificity - b.specificity).abs() <= 1e-12);
        match (macro_auc(&probs, &labels), macro_auc(&p2, &l2)) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn macro_sensitivity_is_permutation_invariant(
        rows in prop::collection::vec((prop::array::uniform3(0.0..1.0f64), 0usize..3), 3..40),
    ) {
        let perm = [2usize, 0, 1];
        let (probs, labels): (Vec<[f64; 3]>, Vec<usize>) = rows.iter().cloned().unzip();
        let p2: Vec<[f64; 3]> = probs.iter().map(|p| {
            let mut q = [0.0; 3];
            for c in 0..3 { q[perm[c]] = p[c]; }
            q
        }).collect();
        let l2: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let a = classification_metrics(&probs, &labels).unwrap();
        let b = classification_metrics(&p2, &l2).unwrap();
        prop_assert!((a.sensitivity - b.sensitivity).abs() <= 1e-12);
        prop_assert!((a.accuracy - b.accuracy).abs() <= 1e-12);
    }
}
