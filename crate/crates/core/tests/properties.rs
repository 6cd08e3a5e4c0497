mod common;

use common::props::*;
use proptest::prelude::*;

proptest! {
    #[test]
    fn break_cycles_returns_maximal_acyclic_subset((n, edges) in edge_sets()) {
        check_break_cycles(n, &edges)?;
    }

    #[test]
    fn schedule_respects_every_edge((n, edges) in edge_sets()) {
        check_schedule(n, &edges)?;
    }

    #[test]
    fn threshold_is_monotone(s in matrices(), t1 in 0.001f64..0.999, t2 in 0.001f64..0.999) {
        check_threshold_monotone(&s, t1, t2)?;
    }

    #[test]
    fn spy_sees_only_in_neighbors((n, edges) in edge_sets(), k in 1usize..4) {
        check_spy(n, &edges, k)?;
    }
}
