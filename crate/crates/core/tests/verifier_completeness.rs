mod common;

use etclab::verifier::VerifierConfig;

fn check(cfg: &VerifierConfig) {
    let t = common::completeness_run(0..100, cfg);
    assert_eq!(t.instances, 100);
    assert!(t.disagree.is_empty(), "{:#?}", t.disagree);
    assert_eq!(t.unsound_witnesses, 0);
    assert!(t.ambiguous <= 4, "{} borderline half-spaces", t.ambiguous);
    // Both verdicts must be exercised.
    assert!(t.sat >= 50 && t.unsat >= 50, "sat {} unsat {}", t.sat, t.unsat);
}

#[test]
fn relu_splitting_matches_enumeration() {
    check(&VerifierConfig {
        input_split_above: usize::MAX,
        ..VerifierConfig::default()
    });
}

#[test]
fn hybrid_splitting_matches_enumeration() {
    check(&VerifierConfig {
        input_split_above: 2,
        ..VerifierConfig::default()
    });
}
