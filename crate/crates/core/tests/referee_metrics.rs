use std::sync::Arc;

use duet_core::backends::{HashedEmbedder, MockGenerator};
use duet_core::eval::{exact_match, normalize_answer, token_f1};
use duet_core::referee::{
    cosine, margin_choice, text_feature_score, text_feature_select, ChosenArm, VerdictSource,
};
use duet_core::{Arm, CandidateAnswer, EmbeddingVector, RefereeConfig};
use proptest::prelude::*;

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["the", "A", "cat", "Cat.", "sat", "on", "mat", "an", "red", "x"]), 0..8)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn margin_rule(s_i in -1.0f64..=1.0, s_e in -1.0f64..=1.0, delta in 0.0f64..1.0) {
        let arm = margin_choice(s_i, s_e, delta);
        prop_assert_eq!(arm == Arm::Internal, s_i - s_e > delta);
        prop_assert_eq!(margin_choice(s_i, s_i, delta), Arm::External);
        prop_assert_eq!(margin_choice(s_i, s_e, f64::INFINITY), Arm::External);
    }

    #[test]
    fn cosine_is_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 4), u in prop::collection::vec(-5.0f64..5.0, 4),
                                 exp in -30i32..30) {
        let (a, b) = (EmbeddingVector::new(v), EmbeddingVector::new(u));
        prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine(&a.scaled(2f64.powi(exp)), &b).unwrap());
    }

    #[test]
    fn text_feature_score_is_bounded(q in "[a-z ]{1,40}", a in "[a-z ]{1,200}") {
        prop_assume!(!q.trim().is_empty() && !a.trim().is_empty());
        let s = text_feature_score(&q, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn text_feature_select_follows_margin(q in "[a-z]{1,6}( [a-z]{1,6}){0,5}", ai in "[a-z]{1,6}( [a-z]{1,6}){0,20}",
                                          ae in "[a-z]{1,6}( [a-z]{1,6}){0,20}", delta in 0.0f64..0.5) {
        let cfg = RefereeConfig::text_feature(delta);
        let a_i = CandidateAnswer::new(ai.clone(), Arm::Internal).unwrap();
        let a_e = CandidateAnswer::new(ae.clone(), Arm::External).unwrap();
        let v = text_feature_select(&q, &a_i, &a_e, &cfg).unwrap();
        let (si, se) = (text_feature_score(&q, &ai).unwrap(), text_feature_score(&q, &ae).unwrap());
        prop_assert_eq!(v.score_internal, Some(si));
        prop_assert_eq!(v.strategy, VerdictSource::TextFeature);
        let expected = if si - se > delta { ChosenArm::Internal } else { ChosenArm::External };
        prop_assert_eq!(v.chosen_arm, expected);
        prop_assert_eq!(v.final_answer, if expected == ChosenArm::Internal { ai } else { ae });
    }

    #[test]
    fn f1_symmetric_and_bounded(p in words(), g in words()) {
        let f = token_f1(&p, &g);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, token_f1(&g, &p));
        if exact_match(&p, &g) {
            prop_assert_eq!(f, 1.0);
        }
    }

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    }
}

#[test]
fn identical_candidates_pick_external() {
    let cfg = RefereeConfig::alignment(Arc::new(HashedEmbedder::new(64)), 0.0);
    let a_i = CandidateAnswer::new("Paris", Arm::Internal).unwrap();
    let a_e = CandidateAnswer::new("Paris", Arm::External).unwrap();
    let v = cfg.decide("Where is the tower?", &a_i, &a_e).unwrap();
    assert_eq!(v.chosen_arm, ChosenArm::External);
}

#[test]
fn summarize_keeps_first_nonempty_line() {
    let judge = MockGenerator::constant("\n  Paris \nbecause reasons");
    let cfg = RefereeConfig::summarize(Arc::new(judge));
    let a_i = CandidateAnswer::new("Lyon", Arm::Internal).unwrap();
    let a_e = CandidateAnswer::new("Paris", Arm::External).unwrap();
    let v = cfg.decide("Where is the tower?", &a_i, &a_e).unwrap();
    assert_eq!(v.final_answer, "Paris");
    assert_eq!(v.chosen_arm, ChosenArm::Synthesized);
    assert_eq!(v.score_internal, None);
}
