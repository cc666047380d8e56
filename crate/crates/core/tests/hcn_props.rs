use std::collections::BTreeSet;

use dlgf_core::hcn::{apply_mask, argmax, softmax};
use proptest::prelude::*;

fn logits_and_mask() -> impl Strategy<Value = (Vec<f64>, BTreeSet<usize>)> {
    prop::collection::vec(-20.0f64..20.0, 1..12).prop_flat_map(|logits| {
        let n = logits.len();
        (Just(logits), prop::collection::btree_set(0..n, 1..=n))
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-20.0f64..20.0, 1..16)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0 || logits.len() == 1));
    }

    #[test]
    fn masking_zeroes_and_keeps_ratios((logits, allowed) in logits_and_mask()) {
        let p = softmax(&logits);
        let q = apply_mask(&p, &allowed).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (i, &v) in q.iter().enumerate() {
            if !allowed.contains(&i) {
                prop_assert_eq!(v, 0.0);
            }
        }
        for &a in &allowed {
            for &b in &allowed {
                prop_assert!((q[a] * p[b] - q[b] * p[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masking_keeps_an_allowed_argmax((logits, allowed) in logits_and_mask()) {
        let p = softmax(&logits);
        let all: Vec<usize> = (0..p.len()).collect();
        let best = argmax(&p, &all).unwrap();
        let q = apply_mask(&p, &allowed).unwrap();
        let kept: Vec<usize> = allowed.iter().copied().collect();
        if allowed.contains(&best) {
            prop_assert_eq!(argmax(&q, &kept), Some(best));
        }
        prop_assert!(allowed.contains(&argmax(&q, &kept).unwrap()));
    }

    #[test]
    fn mask_never_selects_outside(values in prop::collection::vec(0.0f64..1.0, 1..10), pick in prop::collection::vec(any::<bool>(), 10)) {
        let allowed: Vec<usize> = (0..values.len()).filter(|&i| pick[i]).collect();
        match argmax(&values, &allowed) {
            Some(i) => prop_assert!(allowed.contains(&i)),
            None => prop_assert!(allowed.is_empty()),
        }
    }
}
