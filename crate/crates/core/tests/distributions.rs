//! Properties of the probability primitives and an empirical check of the
//! temperature/top-p sampler.

use lco_core::dist::{
    entropy, kl_divergence, log_softmax, normalize_advantages, nucleus_distribution, sample_action,
    softmax, total_variation, AdvantageVector, Normalization, ProbVector,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prob_strategy() -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(1e-6f64..1.0, 2..16).prop_map(|w| ProbVector::from_weights(&w).unwrap())
}

proptest! {
    #[test]
    fn softmax_shift_invariance(z in prop::collection::vec(-300.0f64..300.0, 2..20), c in -400.0f64..400.0) {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let a = softmax(&z).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let total: f64 = a.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(z in prop::collection::vec(-30.0f64..30.0, 2..20)) {
        let ls = log_softmax(&z).unwrap();
        let p = softmax(&z).unwrap();
        for (l, q) in ls.iter().zip(p.iter()) {
            prop_assert!((l - q.ln()).abs() <= 1e-12 * l.abs().max(1.0));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_diagonal(p in prob_strategy(), seed in 0u64..10_000) {
        let n = p.len();
        let q = {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0)).collect();
            ProbVector::from_weights(&w).unwrap()
        };
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-15);
        // Pinsker
        let tv = total_variation(&p, &q).unwrap();
        prop_assert!(tv <= (kl_divergence(&p, &q).unwrap() / 2.0).sqrt() + 1e-12);
    }

    #[test]
    fn entropy_is_bounded(p in prob_strategy()) {
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn normalized_advantages_have_zero_mean(values in prop::collection::vec(-1e3f64..1e3, 1..64), scale in any::<bool>()) {
        let mode = if scale { Normalization::CenterScale { floor: 1e-8 } } else { Normalization::Center };
        let a = normalize_advantages(&AdvantageVector::dense(values.clone()).unwrap(), mode);
        let mean: f64 = a.values().iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() <= 1e-12);
    }

    #[test]
    fn sampling_is_a_function_of_the_seed(p in prob_strategy(), seed in any::<u64>(), t in 0.2f64..2.0, top in 0.1f64..=1.0) {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| sample_action(&p, t, top, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        prop_assert_eq!(draw(), draw());
    }

    #[test]
    fn nucleus_keeps_at_least_top_p(p in prob_strategy(), t in 0.2f64..2.0, top in 0.05f64..=1.0) {
        let kept = nucleus_distribution(&p, t, top).unwrap();
        let total: f64 = kept.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(kept.iter().any(|&w| w > 0.0));
    }
}

/// Pearson χ² of 200 000 draws against the nucleus distribution. The 0.999
/// quantile of χ² with ≤ 7 degrees of freedom is below 24.4.
#[test]
fn sampler_frequencies_match_nucleus_distribution() {
    let cases: [(&[f64], f64, f64); 4] = [
        (&[0.1, 0.2, 0.3, 0.4], 1.0, 1.0),
        (&[0.1, 0.2, 0.3, 0.4], 0.6, 0.95),
        (&[0.05, 0.05, 0.1, 0.2, 0.25, 0.35], 1.5, 0.8),
        (&[0.5, 0.5], 0.3, 0.5),
    ];
    for (i, (p, t, top)) in cases.iter().enumerate() {
        let p = ProbVector::new(p.to_vec()).unwrap();
        let expected = nucleus_distribution(&p, *t, *top).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let draws = 200_000;
        let mut counts = vec![0usize; p.len()];
        for _ in 0..draws {
            counts[sample_action(&p, *t, *top, &mut rng).unwrap()] += 1;
        }
        let mut chi2 = 0.0;
        for (c, e) in counts.iter().zip(&expected) {
            if *e == 0.0 {
                assert_eq!(*c, 0, "case {i}: drew an action outside the nucleus");
                continue;
            }
            let mean = e * draws as f64;
            chi2 += (*c as f64 - mean).powi(2) / mean;
        }
        assert!(chi2 < 24.4, "case {i}: chi2 = {chi2}");
    }
}

/// Hand-computed tempered nucleus: `p^{1/T}` normalized, then truncated.
#[test]
fn nucleus_against_direct_computation() {
    let p = ProbVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let t = 0.5;
    let w: Vec<f64> = p.iter().map(|x| x.powf(1.0 / t)).collect();
    let s: f64 = w.iter().sum();
    let tempered: Vec<f64> = w.iter().map(|x| x / s).collect();
    // descending: 0.4²,0.3²,0.2²,0.1² over 0.30 → 0.533, 0.3, 0.133, 0.033
    let kept = nucleus_distribution(&p, t, 0.8).unwrap();
    let mass = tempered[3] + tempered[2];
    assert!((kept[3] - tempered[3] / mass).abs() < 1e-15);
    assert!((kept[2] - tempered[2] / mass).abs() < 1e-15);
    assert_eq!(&kept[..2], &[0.0, 0.0]);
}
