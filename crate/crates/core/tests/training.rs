mod common;

use card_core::error::CardError;
use card_core::training::{
    train, utility_gradient, CostModel, Environment, EpisodeBatch, Estimator, TrainConfig, Trainer,
};
use card_core::{AnchorKind, CommTopology, ConditionSet, Query, Result};
use common::oracles::*;

fn cfg(beta: f64, estimator: Estimator) -> TrainConfig {
    TrainConfig {
        beta,
        lr: 0.1,
        samples_per_step: 4,
        batch_size: 1,
        steps: 10,
        anchor: AnchorKind::Chain,
        estimator,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn batch() -> EpisodeBatch {
    EpisodeBatch::new(vec![(query(), conditions())]).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn constant_utility_without_cost_leaves_params_unchanged() {
    let p = params(small_dims(), 1);
    let r = roster();
    let mut t = Trainer::new(p.clone(), &r, cfg(0.0, Estimator::Sampled), CostModel::default()).unwrap();
    for _ in 0..5 {
        t.step(&batch(), &ConstEnv(0.6)).unwrap();
    }
    assert_eq!(t.params, p);
    assert!((t.baseline.unwrap() - 0.6).abs() < 1e-15);
}

#[test]
fn cost_alone_drives_soft_cost_down() {
    let p = params(small_dims(), 2);
    let r = roster();
    let mut c = cfg(50.0, Estimator::Sampled);
    c.steps = 50;
    let pairs = vec![(query(), conditions())];
    let (_, hist) = train(p, &r, &pairs, &ConstEnv(0.0), &c, &CostModel::default()).unwrap();
    let (first, last) = (hist[0].soft_cost, hist.last().unwrap().soft_cost);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn exhaustive_estimator_matches_enumerated_expectation() {
    let p = params(small_dims(), 5);
    let r = roster();
    let t = Trainer::new(p, &r, cfg(0.0, Estimator::Exhaustive), CostModel::default()).unwrap();
    let (pg, _) = t.rollouts(&query(), &conditions(), &TableEnv, 0).unwrap();
    assert_eq!(pg.rollouts.len(), 64);
    let oracle = expected_utility_grad(&pg.s);
    for b in [0.0, 0.37, 1.0, -2.5] {
        let g = utility_gradient(&pg.s, &pg.rollouts, b);
        let d = max_abs_diff(g.as_slice(), oracle.as_slice());
        assert!(d < 1e-8, "baseline {b}: {d}");
    }
}

#[test]
fn exhaustive_gradient_matches_parameter_finite_differences() {
    let p = params(small_dims(), 6);
    let r = roster();
    let t = Trainer::new(p.clone(), &r, cfg(0.0, Estimator::Exhaustive), CostModel::default()).unwrap();
    let (grad, _, _) = t.gradient(&batch(), &TableEnv).unwrap();
    assert!(grad.l2_norm() > 1e-4, "{}", grad.l2_norm());
    // loss is −E[u]
    let (rel, name) = fd_check(&p, &grad, 1e-5, |q| -expected_utility(&matrix(q)));
    assert!(rel < 1e-5, "{name}: {rel}");
}

#[test]
fn soft_cost_gradient_matches_finite_differences() {
    for seed in [7, 8] {
        let p = params(small_dims(), seed);
        let analytic = soft_cost_param_grad(&p, 3.0);
        assert!(analytic.l2_norm() > 1e-6, "{}", analytic.l2_norm());
        let (rel, name) = fd_check(&p, &analytic, 1e-5, |q| beta_soft_cost(q, 3.0));
        assert!(rel < 1e-5, "seed {seed}, {name}: {rel}");
    }
}

#[test]
fn trainer_cost_term_equals_backward_of_cost() {
    let p = params(small_dims(), 9);
    let r = roster();
    let t = Trainer::new(p.clone(), &r, cfg(3.0, Estimator::Sampled), CostModel::default()).unwrap();
    let (grad, _, _) = t.gradient(&batch(), &ConstEnv(0.5)).unwrap();
    let expected = soft_cost_param_grad(&p, 3.0);
    for ((name, a), (_, b)) in grad.tensors().iter().zip(expected.tensors().iter()) {
        assert!(max_abs_diff(a.as_slice(), b.as_slice()) < 1e-12, "{name}");
    }
}

struct NanEnv;

impl Environment for NanEnv {
    fn utility(&self, _: &Query, _: &ConditionSet, topology: &CommTopology, _: u64) -> Result<f64> {
        Ok(if topology.edges().is_empty() { 0.5 } else { f64::NAN })
    }
}

#[test]
fn non_finite_utility_is_reported() {
    let r = roster();
    let mut t =
        Trainer::new(params(small_dims(), 1), &r, cfg(0.0, Estimator::Exhaustive), CostModel::default()).unwrap();
    match t.step(&batch(), &NanEnv) {
        Err(e @ CardError::NonFiniteGradient(_)) => assert_eq!(e.exit_code(), 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn training_is_deterministic_and_zero_steps_is_identity() {
    let r = roster();
    let pairs = vec![(query(), conditions())];
    let c = cfg(0.5, Estimator::Sampled);
    let run = || train(params(small_dims(), 4), &r, &pairs, &TableEnv, &c, &CostModel::default()).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(ha, hb);
    assert_ne!(a, params(small_dims(), 4));
    let zero = TrainConfig { steps: 0, ..c };
    let (same, h) = train(params(small_dims(), 4), &r, &pairs, &TableEnv, &zero, &CostModel::default()).unwrap();
    assert_eq!(same, params(small_dims(), 4));
    assert!(h.is_empty());
}

#[test]
fn larger_beta_converges_to_lower_soft_cost() {
    use card_core::sim::{make_config_set, Scenario, SimEnvironment};
    let set = make_config_set(Scenario::Mixed);
    let env = SimEnvironment::from_config_set(&set, 1);
    let cm = CostModel::default();
    let costs: Vec<f64> = [0.0, 0.1, 1.0]
        .iter()
        .map(|&beta| {
            let c = TrainConfig {
                beta,
                steps: 300,
                batch_size: 16,
                samples_per_step: 8,
                seed: 4,
                ..TrainConfig::default()
            };
            let p0 = card_core::GeneratorParams::with_default_dims(4);
            let (p, _) = train(p0, &set.roster, &set.pairs, &env, &c, &cm).unwrap();
            card_core::training::evaluate(&p, &set.roster, &set.pairs, &env, c.anchor, c.tau, &cm, 1)
                .unwrap()
                .mean_soft_cost
        })
        .collect();
    assert!(costs[0] >= costs[1] && costs[1] >= costs[2], "{costs:?}");
}
