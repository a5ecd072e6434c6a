mod support;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn validator_accepts_iff_executor_runs(case in support::arb_equivalence_case()) {
        let (accepted, executed) = support::run_equivalence_case(&case);
        prop_assert_eq!(accepted, executed, "case: {:?}", case);
    }
}

#[test]
fn sampled_cases_cover_both_verdicts() {
    let cases = support::sample(support::arb_equivalence_case(), 1000);
    let verdicts: Vec<(bool, bool)> = cases.iter().map(support::run_equivalence_case).collect();
    let accepted = verdicts.iter().filter(|(a, _)| *a).count();
    assert_eq!(verdicts.iter().filter(|(a, e)| a != e).count(), 0);
    assert!(accepted > 100 && accepted < 900, "accepted {accepted} of 1000");
}
