use proptest::prelude::*;

use reviewlens::numerics::{hellinger, mask_count, mask_indices_by_quantile, softmax, ProbVec};
use reviewlens::tasks::localization_score;

fn dist(d: usize) -> impl Strategy<Value = ProbVec> {
    prop::collection::vec(0.0f64..1.0, d).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-9).then(|| ProbVec::new(v.iter().map(|x| x / s).collect()).unwrap())
    })
}

fn triple() -> impl Strategy<Value = (ProbVec, ProbVec, ProbVec)> {
    (1usize..32).prop_flat_map(|d| (dist(d), dist(d), dist(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hellinger_is_a_metric((p, q, r) in triple()) {
        let pq = hellinger(&p, &q).unwrap();
        prop_assert_eq!(pq, hellinger(&q, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert_eq!(hellinger(&p, &p).unwrap(), 0.0);
        let pr = hellinger(&p, &r).unwrap();
        let qr = hellinger(&q, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-12);
        let bc: f64 = p.as_slice().iter().zip(q.as_slice()).map(|(a, b)| (a * b).sqrt()).sum();
        prop_assert!((pq - (1.0 - bc).max(0.0).sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        x in prop::collection::vec(-50.0f64..50.0, 1..40),
        c in -100.0f64..100.0,
    ) {
        let p = softmax(&x).unwrap();
        let s: f64 = p.as_slice().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(p.as_slice().iter().all(|&v| v >= 0.0));
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_mask_takes_the_lowest_scores(
        scores in prop::collection::vec(0u8..6, 1..80),
        tenth in 0usize..=10,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let rho = tenth as f64 / 10.0;
        let m = mask_indices_by_quantile(&scores, rho).unwrap();
        let d = scores.len();
        prop_assert_eq!(m.len(), tenth * d / 10);
        prop_assert_eq!(m.len(), mask_count(d, rho));
        prop_assert!(m.windows(2).all(|w| w[0] < w[1]));
        // every masked score is <= every unmasked score, ties go to lower indices
        for &i in &m {
            for j in (0..d).filter(|j| !m.contains(j)) {
                prop_assert!(scores[i] < scores[j] || (scores[i] == scores[j] && i < j));
            }
        }
    }

    #[test]
    fn localization_is_a_fraction(
        ia in prop::collection::vec(0.0f64..1.0, 1..30),
        pick in any::<prop::sample::Index>(),
    ) {
        let mut rel = vec![false; ia.len()];
        rel[pick.index(ia.len())] = true;
        if ia.iter().sum::<f64>() > 0.0 {
            let s = localization_score(&ia, &rel).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }
    }
}
