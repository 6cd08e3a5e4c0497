//! Strategies and checks for the graph and runtime invariants. Shared by the
//! property suite and the acceptance gate.

#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use card_core::graph::{break_cycles, schedule, threshold, CommTopology, Edge, EdgeProbabilityMatrix};
use card_core::runtime::{run_rounds, Aggregation, Message, RoundPrompts};
use card_core::Query;

/// Arbitrary directed edges without self-loops, possibly cyclic, with
/// distinct (from, to) pairs.
pub fn edge_sets() -> impl Strategy<Value = (usize, Vec<Edge>)> {
    (1usize..9).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).collect();
        let k = pairs.len();
        (Just(n), proptest::collection::vec((any::<bool>(), 0.0f64..=1.0), k)).prop_map(move |(n, picks)| {
            let edges = pairs
                .iter()
                .zip(picks)
                .filter(|(_, (keep, _))| *keep)
                .map(|(&(i, j), (_, p))| Edge::new(i, j, p))
                .collect();
            (n, edges)
        })
    })
}

pub fn matrices() -> impl Strategy<Value = EdgeProbabilityMatrix> {
    (1usize..9).prop_flat_map(|n| {
        proptest::collection::vec(0.0f64..=1.0, n * n).prop_map(move |mut v| {
            for i in 0..n {
                v[i * n + i] = 0.0;
            }
            EdgeProbabilityMatrix::from_values(n, v).unwrap()
        })
    })
}

fn keys(edges: &[Edge]) -> BTreeSet<(usize, usize)> {
    edges.iter().map(|e| (e.from, e.to)).collect()
}

fn is_acyclic(n: usize, edges: &[Edge]) -> bool {
    schedule(edges, n).is_ok()
}

/// `break_cycles` returns an acyclic subset that no removed edge can extend.
pub fn check_break_cycles(n: usize, edges: &[Edge]) -> Result<(), TestCaseError> {
    let kept = break_cycles(edges);
    let kept_keys = keys(&kept);
    let all = keys(edges);
    prop_assert!(kept_keys.is_subset(&all));
    prop_assert_eq!(kept_keys.len(), kept.len());
    prop_assert!(is_acyclic(n, &kept));
    if is_acyclic(n, edges) {
        prop_assert_eq!(&kept_keys, &all);
    }
    for e in edges.iter().filter(|e| !kept_keys.contains(&(e.from, e.to))) {
        let mut extended = kept.clone();
        extended.push(*e);
        prop_assert!(!is_acyclic(n, &extended), "removed edge {:?} closes no cycle", (e.from, e.to));
    }
    Ok(())
}

/// Scheduling the repaired graph yields a permutation with every edge's
/// source before its target.
pub fn check_schedule(n: usize, edges: &[Edge]) -> Result<(), TestCaseError> {
    let kept = break_cycles(edges);
    let order = schedule(&kept, n).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let mut sorted = order.clone();
    sorted.sort_unstable();
    prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    let mut pos = vec![0; n];
    for (k, &a) in order.iter().enumerate() {
        pos[a] = k;
    }
    for e in &kept {
        prop_assert!(pos[e.from] < pos[e.to]);
    }
    Ok(())
}

/// Raising τ can only remove edges.
pub fn check_threshold_monotone(s: &EdgeProbabilityMatrix, t1: f64, t2: f64) -> Result<(), TestCaseError> {
    let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let a = keys(&threshold(s, lo).unwrap());
    let b = keys(&threshold(s, hi).unwrap());
    prop_assert!(b.is_subset(&a));
    let topo = CommTopology::from_matrix(s, hi).unwrap();
    prop_assert!(keys(topo.edges()).is_subset(&b));
    Ok(())
}

/// (agent, round, senders, contents) for every call.
type SpyLog = Vec<(usize, usize, Vec<usize>, Vec<String>)>;

/// An executor that records what it was shown sees exactly its
/// in-neighbors' same-round messages, always after they were produced.
pub fn check_spy(n: usize, edges: &[Edge], k: usize) -> Result<(), TestCaseError> {
    let topo = CommTopology::new(n, break_cycles(edges)).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let log: RefCell<SpyLog> = RefCell::new(Vec::new());
    let spy = |agent: usize, round: usize, _: &RoundPrompts, up: &[Message]| {
        log.borrow_mut().push((
            agent,
            round,
            up.iter().map(|m| m.from).collect(),
            up.iter().map(|m| m.content.clone()).collect(),
        ));
        Ok(format!("r{round}a{agent}"))
    };
    let q = Query::new("q", "probe").unwrap();
    run_rounds(&topo, &q, &spy, k, Aggregation::SelectLast).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let log = log.into_inner();
    prop_assert_eq!(log.len(), n * k);
    for (idx, (agent, round, senders, contents)) in log.iter().enumerate() {
        let expected = topo.in_neighbors(*agent).unwrap();
        prop_assert_eq!(senders, &expected);
        for (s, c) in senders.iter().zip(contents) {
            prop_assert_eq!(c, &format!("r{round}a{s}"));
            let produced = log[..idx].iter().any(|(a, r, _, _)| a == s && r == round);
            prop_assert!(produced, "agent {} saw {} before it ran", agent, s);
        }
    }
    Ok(())
}
