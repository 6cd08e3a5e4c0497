//! A 3-agent fixture and independent reference computations for the
//! training gradients.

#![allow(dead_code)]

use card_core::agent::{AgentProfile, ConditionFeature, ConditionSet, Query, Roster};
use card_core::generator::{backward, forward, GeneratorDims, GeneratorInputs, GeneratorParams};
use card_core::graph::{break_cycles, AnchorKind, AnchorTopology, CommTopology, Edge, EdgeProbabilityMatrix};
use card_core::linalg::Mat;
use card_core::training::{edge_cost_matrix, soft_cost, CostModel, Environment};
use card_core::{EmbedderSpec, Result};

pub fn roster() -> Roster {
    Roster::new(vec![
        AgentProfile::new("expert", "Knowlegable Expert", "gpt-4o-mini", vec![]).unwrap(),
        AgentProfile::new("searcher", "Searcher", "gpt-4o-mini", vec!["Google".into()]).unwrap(),
        AgentProfile::new("critic", "Critic", "gpt-4o", vec![]).unwrap(),
    ])
    .unwrap()
}

pub fn conditions() -> ConditionSet {
    let mut cs = ConditionSet::new().with_global(ConditionFeature::scalar("tool_quality", 0.9));
    for (id, q, i, o) in [("expert", 0.4, 0.15, 0.6), ("searcher", 0.6, 0.9, 0.9), ("critic", 0.85, 2.5, 10.0)] {
        cs.set_agent(id, ConditionFeature::scalar("model_quality", q));
        cs.set_agent(id, ConditionFeature::scalar("input_price", i));
        cs.set_agent(id, ConditionFeature::scalar("output_price", o));
    }
    cs
}

pub fn query() -> Query {
    Query::new("fx", "Which planet has the most moons?").unwrap()
}

pub fn small_dims() -> GeneratorDims {
    GeneratorDims { d_in: 16, d_hid: 8, d_lat: 4, d_dec: 6 }
}

pub fn params(dims: GeneratorDims, seed: u64) -> GeneratorParams {
    GeneratorParams::init(dims, EmbedderSpec::feature_hash(dims.d_in, 0), seed).unwrap()
}

pub fn anchor() -> AnchorTopology {
    AnchorTopology::new(AnchorKind::Chain, 3).unwrap()
}

pub fn inputs(p: &GeneratorParams) -> GeneratorInputs {
    GeneratorInputs::build(&p.embedder().unwrap(), &roster(), &conditions(), &query()).unwrap()
}

pub fn matrix(p: &GeneratorParams) -> EdgeProbabilityMatrix {
    forward(p, &inputs(p), &anchor()).unwrap().matrix().clone()
}

/// Deterministic, topology-sensitive utility: rewards the critic hearing the
/// expert, penalizes the expert depending on the searcher, plus a small
/// per-edge term.
pub struct TableEnv;

pub fn table_utility(topology: &CommTopology) -> f64 {
    let mut u = 0.25 + 0.05 * topology.edges().len() as f64;
    if topology.has_edge(0, 2) {
        u += 0.3;
    }
    if topology.has_edge(1, 0) {
        u -= 0.2;
    }
    if topology.has_edge(2, 1) && topology.has_edge(1, 2) {
        u += 1.0;
    }
    u.clamp(0.0, 1.0)
}

impl Environment for TableEnv {
    fn utility(&self, _: &Query, _: &ConditionSet, topology: &CommTopology, _: u64) -> Result<f64> {
        Ok(table_utility(topology))
    }
}

pub struct ConstEnv(pub f64);

impl Environment for ConstEnv {
    fn utility(&self, _: &Query, _: &ConditionSet, _: &CommTopology, _: u64) -> Result<f64> {
        Ok(self.0)
    }
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];

fn utility_of(s: &EdgeProbabilityMatrix, mask: u32) -> f64 {
    let edges: Vec<Edge> = PAIRS
        .iter()
        .enumerate()
        .filter(|(b, _)| mask >> b & 1 == 1)
        .map(|(_, &(i, j))| Edge::new(i, j, s.get(i, j)))
        .collect();
    table_utility(&CommTopology::new(3, break_cycles(&edges)).unwrap())
}

fn mask_prob(s: &EdgeProbabilityMatrix, mask: u32, skip: Option<usize>) -> f64 {
    PAIRS
        .iter()
        .enumerate()
        .filter(|(b, _)| Some(*b) != skip)
        .map(|(b, &(i, j))| if mask >> b & 1 == 1 { s.get(i, j) } else { 1.0 - s.get(i, j) })
        .product()
}

/// `E[u]` by summing over all 64 edge subsets.
pub fn expected_utility(s: &EdgeProbabilityMatrix) -> f64 {
    (0u32..64).map(|m| mask_prob(s, m, None) * utility_of(s, m)).sum()
}

/// `∂E[u]/∂S_ij = E[u | e_ij = 1] − E[u | e_ij = 0]`, enumerating the other
/// five edges.
pub fn expected_utility_grad(s: &EdgeProbabilityMatrix) -> Mat {
    let mut g = Mat::zeros(3, 3);
    for (b, &(i, j)) in PAIRS.iter().enumerate() {
        let mut d = 0.0;
        for m in (0u32..64).filter(|m| m >> b & 1 == 0) {
            let w = mask_prob(s, m, Some(b));
            d += w * (utility_of(s, m | 1 << b) - utility_of(s, m));
        }
        g[(i, j)] = d;
    }
    g
}

/// Worst per-tensor relative error `‖a − fd‖ / ‖fd‖` between the analytic
/// gradient and central differences of `f`, plus the tensor name.
pub fn fd_check(
    p: &GeneratorParams,
    analytic: &GeneratorParams,
    h: f64,
    f: impl Fn(&GeneratorParams) -> f64,
) -> (f64, &'static str) {
    let mut worst = (0.0, "");
    let names: Vec<&'static str> = p.tensors().iter().map(|(n, _)| *n).collect();
    for (t, name) in names.iter().enumerate() {
        let len = p.tensors()[t].1.as_slice().len();
        let mut diff2 = 0.0;
        let mut ref2 = 0.0;
        for k in 0..len {
            let mut plus = p.clone();
            plus.tensors_mut()[t].1.as_mut_slice()[k] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[t].1.as_mut_slice()[k] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.tensors()[t].1.as_slice()[k];
            diff2 += (a - fd) * (a - fd);
            ref2 += fd * fd;
        }
        let rel = if ref2 == 0.0 { diff2.sqrt() } else { (diff2 / ref2).sqrt() };
        if rel >= worst.0 {
            worst = (rel, name);
        }
    }
    worst
}

/// Analytic gradient of `β · soft_cost(S(θ))` via the generator backward pass.
pub fn soft_cost_param_grad(p: &GeneratorParams, beta: f64) -> GeneratorParams {
    let cost = edge_cost_matrix(&roster(), &conditions(), &CostModel::default()).unwrap();
    let fwd = forward(p, &inputs(p), &anchor()).unwrap();
    let mut d_s = cost.clone();
    d_s.as_mut_slice().iter_mut().for_each(|v| *v *= beta);
    backward(p, &fwd, &d_s).unwrap()
}

pub fn beta_soft_cost(p: &GeneratorParams, beta: f64) -> f64 {
    let cost = edge_cost_matrix(&roster(), &conditions(), &CostModel::default()).unwrap();
    beta * soft_cost(&matrix(p), &cost).unwrap()
}
