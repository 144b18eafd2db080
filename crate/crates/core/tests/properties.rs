//! Invariants of the losses, metrics and attacks over random inputs.

mod common;

use proptest::prelude::*;

use common::draw;
use siu_core::attacks::{is_suspicious, min_k_mean, rouge_l, RATIO_WINDOW};
use siu_core::losses::{dmk_loss, evaluate_loss, ga_kl_loss, ga_loss, DualMask, LossSpec};
use siu_core::metrics::{c_dis_from_probs, diversity, masked_perplexity, tv_distance};
use siu_core::model::log_softmax;
use siu_core::Token;

fn tokens(max: usize) -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec((0u32..6).prop_map(Token), 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dmk_of_a_model_with_itself_is_zero(seed in any::<u64>()) {
        let d = draw(seed);
        prop_assert_eq!(dmk_loss(&d.params, &d.params, d.seq(), &d.mask).unwrap().dmk, 0.0);
    }

    #[test]
    fn dmk_without_kept_positions_is_zero(seed in any::<u64>()) {
        let d = draw(seed);
        let mask = DualMask { token_mask: vec![false; d.answer.len()], vocab_mask: d.mask.vocab_mask.clone() };
        let v = dmk_loss(&d.params, &d.reference, d.seq(), &mask).unwrap();
        prop_assert_eq!(v.dmk, 0.0);
        prop_assert_eq!(v.kl_terms, 0);
    }

    #[test]
    fn dmk_sums_exactly_the_kept_terms(seed in any::<u64>()) {
        let d = draw(seed);
        let v = dmk_loss(&d.params, &d.reference, d.seq(), &d.mask).unwrap();
        prop_assert_eq!(v.kl_terms, d.mask.term_count());
        let full = DualMask::ones(d.answer.len(), d.params.dims.vocab_size);
        prop_assert!(dmk_loss(&d.params, &d.reference, d.seq(), &full).unwrap().dmk >= 0.0);
    }

    #[test]
    fn ga_is_negated_ce_and_zero_kl_weight_changes_nothing(seed in any::<u64>()) {
        let d = draw(seed);
        let ce = evaluate_loss(&d.params, d.seq(), &LossSpec::cross_entropy()).unwrap().total;
        let ga = ga_loss(&d.params, d.seq()).unwrap();
        prop_assert_eq!(ga, -ce);
        prop_assert_eq!(ga_kl_loss(&d.params, &d.reference, d.seq(), 0.0).unwrap(), ga);
    }

    #[test]
    fn total_is_linear_in_its_weights(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let d = draw(seed);
        let ce = evaluate_loss(&d.params, d.seq(), &LossSpec::cross_entropy()).unwrap().total;
        let dmk = dmk_loss(&d.params, &d.reference, d.seq(), &d.mask).unwrap().dmk;
        let t = evaluate_loss(&d.params, d.seq(), &LossSpec::total(&d.reference, &d.mask, a, b)).unwrap().total;
        prop_assert!((t - (a * ce + b * dmk)).abs() < 1e-10);
    }

    #[test]
    fn rouge_is_symmetric_bounded_and_reflexive(a in tokens(10), b in tokens(10)) {
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((r - rouge_l(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(rouge_l(&a, &a), 1.0);
    }

    #[test]
    fn min_k_never_exceeds_the_full_mean(
        lp in prop::collection::vec(-20.0f64..0.0, 1..30),
        k in 0.1f64..100.0,
    ) {
        prop_assert!(min_k_mean(&lp, k).unwrap() <= min_k_mean(&lp, 100.0).unwrap() + 1e-12);
    }

    #[test]
    fn suspicion_window_is_open(r in 0.5f64..2.0) {
        let inside = r > 1.0 / RATIO_WINDOW && r < RATIO_WINDOW;
        prop_assert_eq!(is_suspicious(r), inside);
    }

    #[test]
    fn diversity_is_a_permutation_invariant_percentage(
        mut outs in prop::collection::vec(tokens(8), 1..6),
        rot in 0usize..6,
    ) {
        let d = diversity(&outs);
        prop_assert!((0.0..=100.0).contains(&d));
        let n = outs.len();
        outs.rotate_left(rot % n);
        outs.reverse();
        prop_assert_eq!(diversity(&outs), d);
    }

    #[test]
    fn fluency_ignores_masked_positions(
        rows in prop::collection::vec((-10.0f64..0.0, -10.0f64..0.0, any::<bool>()), 1..20),
    ) {
        let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let b: Vec<f64> = rows.iter().map(|r| if r.2 { r.1 } else { r.0 }).collect();
        let masked: Vec<bool> = rows.iter().map(|r| r.2).collect();
        let pa = masked_perplexity(&a, &masked, 64);
        prop_assert_eq!(pa, masked_perplexity(&b, &masked, 64));
        prop_assert!(pa >= 1.0);
    }

    #[test]
    fn c_dis_grows_as_the_name_becomes_less_likely(
        p in 0.01f64..1.0,
        q1 in 0.001f64..1.0,
        shrink in 0.01f64..0.99,
    ) {
        prop_assert_eq!(c_dis_from_probs(&[(p, p)]), 0.0);
        prop_assert!(c_dis_from_probs(&[(p, q1 * shrink)]) > c_dis_from_probs(&[(p, q1)]));
    }

    #[test]
    fn tv_is_a_symmetric_distance(
        za in prop::collection::vec(-5.0f64..5.0, 8),
        zb in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let (a, b) = (log_softmax(&za), log_softmax(&zb));
        let t = tv_distance(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&t));
        prop_assert!((t - tv_distance(&b, &a)).abs() < 1e-15);
        prop_assert_eq!(tv_distance(&a, &a), 0.0);
    }
}
