mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ledger_matches_reference_model(seed in any::<u64>(), steps in 1usize..400) {
        if let Err(e) = common::ledger_model::run_sequence(seed, steps) {
            prop_assert!(false, "{}", e);
        }
    }
}
