mod common;

use common::{labels_and_partners, random_unit};
use imbacon::sphere::{EmbeddingSet, Mat, RngStream};
use imbacon::theory::{bound_rhs, measure_epsilon, verify_bound, BoundForm};
use proptest::prelude::*;

/// `n` rows `s_i · normalize(c + spread·ξ_i)` with random scales `s_i`.
fn near_collapsed(n: usize, d: usize, spread: f64, rng: &mut RngStream) -> Mat {
    let c = rng.unit_vec(d);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let scale = 0.5 + 2.0 * rng.uniform();
            c.iter().map(|ci| scale * (ci + spread * rng.normal())).collect()
        })
        .collect();
    Mat::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradient_within_proof_bound_near_collapse(
        half in 2usize..64,
        d in 2usize..16,
        spread in 0.001f64..0.05,
        frac in prop::sample::select(vec![0.5, 0.05, 0.01]),
        tau in prop::sample::select(vec![0.07, 0.1, 0.5, 1.0]),
        seed in 0u64..10_000,
    ) {
        let mut rng = RngStream::new(seed, 1);
        let n = 2 * half;
        let emb = EmbeddingSet::from_w(&near_collapsed(n, d, spread, &mut rng)).unwrap();
        let (labels, _) = labels_and_partners(n, frac, &mut rng);
        let eval = verify_bound(&emb, &labels, tau, 0.3).unwrap();
        prop_assume!(!eval.premise_violated);
        for a in &eval.anchors {
            prop_assert!(a.satisfied_proof, "anchor {}: {} > {}", a.index, a.grad_norm, a.rhs_proof);
        }
    }

    #[test]
    fn rhs_non_decreasing_in_epsilon(
        tau in 0.01f64..2.0,
        w_norm in 0.1f64..10.0,
        others in 2usize..500,
        frac in 0.0f64..1.0,
    ) {
        let positives = ((frac * others as f64) as usize).clamp(1, others);
        for form in [BoundForm::ProofFinal, BoundForm::Theorem] {
            let values: Vec<f64> = (0..50)
                .map(|k| bound_rhs(0.3 * k as f64 / 49.0, tau, w_norm, positives, others, form).unwrap())
                .collect();
            for w in values.windows(2) {
                prop_assert!(w[1] >= w[0], "{form:?}: {} then {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn more_positives_tighter_rhs(eps in 0.0f64..0.3, tau in 0.01f64..2.0, w_norm in 0.1f64..10.0, others in 2usize..300) {
        let mut prev = f64::INFINITY;
        for p in 1..=others {
            let r = bound_rhs(eps, tau, w_norm, p, others, BoundForm::ProofFinal).unwrap();
            prop_assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn epsilon_is_the_largest_pairwise_distance(n in 2usize..80, d in 2usize..6, seed in 0u64..1000) {
        let mut rng = RngStream::new(seed, 2);
        let z = random_unit(n, d, &mut rng);
        let mut best: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dd: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                best = best.max(dd);
            }
        }
        prop_assert_eq!(measure_epsilon(&z), best);
    }
}

#[test]
fn rhs_vanishes_at_identical_embeddings() {
    for form in [BoundForm::ProofFinal, BoundForm::Theorem] {
        assert_eq!(bound_rhs(0.0, 0.1, 1.0, 3, 9, form).unwrap(), 0.0);
    }
}

#[test]
fn forms_agree_when_every_other_view_is_positive() {
    // With |P| = |A| the (1 - |P|/|A|) terms drop out, leaving e^{-x}(e^x - 1)
    // in one form and e^x - 1 in the other.
    let (eps, tau) = (0.2, 0.1);
    let x: f64 = eps * eps / tau;
    let pre = (eps + eps * eps / 2.0) / tau;
    let proof = bound_rhs(eps, tau, 1.0, 7, 7, BoundForm::ProofFinal).unwrap();
    let theorem = bound_rhs(eps, tau, 1.0, 7, 7, BoundForm::Theorem).unwrap();
    assert!((proof - pre * (1.0 - (-x).exp())).abs() < 1e-12);
    assert!((theorem - pre * x.exp_m1()).abs() < 1e-12);
}
