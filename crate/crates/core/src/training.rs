//! Environment-aware training of the generator.
//!
//! The per-pair loss is `−u(answer) + β · Σ_ij Cost_ij · S_ij`. Utility comes
//! from executing sampled graphs and is treated as a black box, so its
//! gradient is estimated with the likelihood ratio over independent
//! Bernoulli edge decisions, with a running-mean baseline. The cost term is
//! differentiated exactly.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{features, ConditionSet, Query, Roster};
use crate::embedding::{splitmix64, Embedder};
use crate::error::{CardError, Result};
use crate::generator::{backward, forward, GeneratorInputs, GeneratorParams};
use crate::graph::{break_cycles, AnchorKind, AnchorTopology, CommTopology, Edge, EdgeProbabilityMatrix};
use crate::linalg::Mat;

/// Utility provider: scores the aggregated answer of one execution.
pub trait Environment {
    /// Utility in `[0, 1]` of running `topology` on `query` under
    /// `conditions`. `seed` drives any randomness in the execution.
    fn utility(&self, query: &Query, conditions: &ConditionSet, topology: &CommTopology, seed: u64) -> Result<f64>;
}

pub const DEFAULT_TOKENS_PER_MESSAGE: f64 = 512.0;
pub const PROB_CLAMP: f64 = 1e-6;
/// Largest edge count for which exhaustive enumeration is allowed.
pub const MAX_EXHAUSTIVE_EDGES: usize = 20;

/// Prices come from each agent's `input_price` / `output_price` condition
/// features (currency per million tokens).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub tokens_per_message: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { tokens_per_message: DEFAULT_TOKENS_PER_MESSAGE }
    }
}

impl CostModel {
    pub fn new(tokens_per_message: f64) -> Result<Self> {
        if !(tokens_per_message > 0.0 && tokens_per_message.is_finite()) {
            return Err(CardError::Invalid(format!("tokens per message must be positive, got {tokens_per_message}")));
        }
        Ok(CostModel { tokens_per_message })
    }
}

fn price(conditions: &ConditionSet, agent: &str, feature: &str) -> Result<f64> {
    let p = conditions
        .scalar(agent, feature)
        .ok_or_else(|| CardError::MissingPriceFeature { agent: agent.to_string(), feature: feature.to_string() })?;
    if p < 0.0 {
        return Err(CardError::Invalid(format!("agent `{agent}` has negative {feature}")));
    }
    Ok(p)
}

/// `Cost[i][j] = (out_price(i) + in_price(j)) · L / 10⁶`, zero diagonal.
pub fn edge_cost_matrix(roster: &Roster, conditions: &ConditionSet, cm: &CostModel) -> Result<Mat> {
    let n = roster.len();
    let mut prices = Vec::with_capacity(n);
    for a in roster.iter() {
        prices.push((
            price(conditions, &a.id, features::INPUT_PRICE)?,
            price(conditions, &a.id, features::OUTPUT_PRICE)?,
        ));
    }
    let mut cost = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cost[(i, j)] = (prices[i].1 + prices[j].0) * cm.tokens_per_message / 1e6;
            }
        }
    }
    Ok(cost)
}

/// `Σ_{i≠j} Cost[i][j] · s[i][j]`. Its gradient with respect to `s` is `cost`.
pub fn soft_cost(s: &EdgeProbabilityMatrix, cost: &Mat) -> Result<f64> {
    if cost.shape() != (s.n(), s.n()) {
        return Err(CardError::ShapeMismatch(format!(
            "cost matrix {:?} against {}x{} probabilities",
            cost.shape(),
            s.n(),
            s.n()
        )));
    }
    Ok(s.pairs().map(|(i, j)| cost[(i, j)] * s.get(i, j)).sum())
}

/// One draw of independent Bernoulli edges.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGraph {
    pub n: usize,
    /// Row-major inclusion flags; the diagonal is always false.
    pub included: Vec<bool>,
    pub log_prob: f64,
}

impl SampledGraph {
    pub fn edges(&self, s: &EdgeProbabilityMatrix) -> Vec<Edge> {
        s.pairs().filter(|&(i, j)| self.included[i * self.n + j]).map(|(i, j)| Edge::new(i, j, s.get(i, j))).collect()
    }

    /// The sample after cycle repair, ready to execute.
    pub fn topology(&self, s: &EdgeProbabilityMatrix) -> Result<CommTopology> {
        CommTopology::new(self.n, break_cycles(&self.edges(s)))
    }
}

fn bernoulli_log_prob(s: &EdgeProbabilityMatrix, included: &[bool]) -> f64 {
    s.pairs()
        .map(|(i, j)| {
            let p = s.get(i, j);
            if included[i * s.n() + j] {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

pub fn sample_graph(s: &EdgeProbabilityMatrix, seed: u64) -> SampledGraph {
    let n = s.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut included = vec![false; n * n];
    for (i, j) in s.pairs() {
        let u: f64 = rng.gen();
        included[i * n + j] = u < s.get(i, j);
    }
    let log_prob = bernoulli_log_prob(s, &included);
    SampledGraph { n, included, log_prob }
}

/// Every outcome with its exact probability. Only for tiny graphs.
pub fn enumerate_graphs(s: &EdgeProbabilityMatrix) -> Result<Vec<(SampledGraph, f64)>> {
    let n = s.n();
    let pairs: Vec<(usize, usize)> = s.pairs().collect();
    if pairs.len() > MAX_EXHAUSTIVE_EDGES {
        return Err(CardError::Invalid(format!("{} candidate edges is too many to enumerate", pairs.len())));
    }
    Ok((0u64..1 << pairs.len())
        .map(|mask| {
            let mut included = vec![false; n * n];
            for (b, &(i, j)) in pairs.iter().enumerate() {
                included[i * n + j] = mask >> b & 1 == 1;
            }
            let log_prob = bernoulli_log_prob(s, &included);
            (SampledGraph { n, included, log_prob }, log_prob.exp())
        })
        .collect())
}

/// `∂ log P(sample) / ∂ S`, with S clamped away from 0 and 1.
pub fn log_prob_grad(s: &EdgeProbabilityMatrix, sample: &SampledGraph) -> Mat {
    let n = s.n();
    let mut g = Mat::zeros(n, n);
    for (i, j) in s.pairs() {
        let p = s.get(i, j).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let e = if sample.included[i * n + j] { 1.0 } else { 0.0 };
        g[(i, j)] = (e - p) / (p * (1.0 - p));
    }
    g
}

/// A scored execution of one sampled graph.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub sample: SampledGraph,
    /// Averaging weight: `1/M` for Monte-Carlo draws, the outcome
    /// probability under exhaustive enumeration.
    pub weight: f64,
    pub utility: f64,
}

/// Score-function estimate of `∂E[u]/∂S`: `Σ_m w_m (u_m − b) ∂log P_m/∂S`.
pub fn utility_gradient(s: &EdgeProbabilityMatrix, rollouts: &[Rollout], baseline: f64) -> Mat {
    let n = s.n();
    let mut g = Mat::zeros(n, n);
    for r in rollouts {
        let adv = r.utility - baseline;
        if adv == 0.0 || r.weight == 0.0 {
            continue;
        }
        g.add_scaled(&log_prob_grad(s, &r.sample), r.weight * adv);
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Estimator {
    /// `samples_per_step` independent draws per pair.
    #[default]
    Sampled,
    /// Every edge subset, weighted by its probability.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub samples_per_step: usize,
    pub baseline_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub k_rounds: usize,
    pub anchor: AnchorKind,
    pub estimator: Estimator,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.2,
            lr: 0.5,
            samples_per_step: 4,
            baseline_decay: 0.9,
            steps: 300,
            batch_size: 16,
            tau: crate::graph::DEFAULT_TAU,
            k_rounds: 1,
            anchor: AnchorKind::Chain,
            estimator: Estimator::Sampled,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CardError::Invalid(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.samples_per_step == 0 || self.batch_size == 0 || self.k_rounds == 0 {
            return bad("samples_per_step, batch_size and k_rounds must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline decay must lie in [0, 1), got {}", self.baseline_decay));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CardError::InvalidThreshold(self.tau));
        }
        Ok(())
    }
}

/// Pairs used in one update.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub pairs: Vec<(Query, ConditionSet)>,
}

impl EpisodeBatch {
    pub fn new(pairs: Vec<(Query, ConditionSet)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CardError::Invalid("episode batch is empty".into()));
        }
        Ok(EpisodeBatch { pairs })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean over the batch of `−E[u] + β · soft_cost`.
    pub loss: f64,
    pub mean_utility: f64,
    pub soft_cost: f64,
    /// Baseline after this step's update.
    pub baseline: f64,
}

pub const METRICS_HEADER: &str = "step\tloss\tmean_utility\tsoft_cost\tbaseline";

impl StepMetrics {
    pub fn tsv_row(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.step, self.loss, self.mean_utility, self.soft_cost, self.baseline)
    }
}

pub fn metrics_tsv(history: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        writeln!(out, "{}", m.tsv_row()).unwrap();
    }
    out
}

/// Mutable training state: parameters, running baseline and step counter.
pub struct Trainer<'a> {
    pub params: GeneratorParams,
    pub baseline: Option<f64>,
    pub step: usize,
    roster: &'a Roster,
    embedder: Embedder,
    cfg: TrainConfig,
    cm: CostModel,
}

/// Diagnostics from one pair in a step, before the parameter update.
#[derive(Clone, Debug)]
pub struct PairGradient {
    pub s: EdgeProbabilityMatrix,
    pub rollouts: Vec<Rollout>,
    pub soft_cost: f64,
    pub cost: Mat,
}

fn rollout_seed(seed: u64, step: usize, pair: usize, draw: usize) -> u64 {
    [step as u64, pair as u64, draw as u64].iter().fold(splitmix64(seed), |h, &v| splitmix64(h ^ v))
}

impl<'a> Trainer<'a> {
    pub fn new(params: GeneratorParams, roster: &'a Roster, cfg: TrainConfig, cm: CostModel) -> Result<Self> {
        cfg.validate()?;
        if roster.is_empty() {
            return Err(CardError::Invalid("roster is empty".into()));
        }
        let embedder = params.embedder()?;
        Ok(Trainer { params, baseline: None, step: 0, roster, embedder, cfg, cm })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn anchor(&self) -> Result<AnchorTopology> {
        AnchorTopology::new(self.cfg.anchor, self.roster.len())
    }

    /// Runs the forward pass and all rollouts for one pair.
    pub fn rollouts(
        &self,
        query: &Query,
        conditions: &ConditionSet,
        env: &dyn Environment,
        pair_index: usize,
    ) -> Result<(PairGradient, crate::generator::ForwardPass)> {
        let inputs = GeneratorInputs::build(&self.embedder, self.roster, conditions, query)?;
        let fwd = forward(&self.params, &inputs, &self.anchor()?)?;
        let s = fwd.matrix().clone();
        let cost = edge_cost_matrix(self.roster, conditions, &self.cm)?;
        let sc = soft_cost(&s, &cost)?;
        let mut rollouts = Vec::new();
        match self.cfg.estimator {
            Estimator::Sampled => {
                let m = self.cfg.samples_per_step;
                for draw in 0..m {
                    let seed = rollout_seed(self.cfg.seed, self.step, pair_index, draw);
                    let sample = sample_graph(&s, seed);
                    let utility = env.utility(query, conditions, &sample.topology(&s)?, seed)?;
                    rollouts.push(Rollout { sample, weight: 1.0 / m as f64, utility });
                }
            }
            Estimator::Exhaustive => {
                let seed = rollout_seed(self.cfg.seed, self.step, pair_index, 0);
                for (sample, prob) in enumerate_graphs(&s)? {
                    let utility = env.utility(query, conditions, &sample.topology(&s)?, seed)?;
                    rollouts.push(Rollout { sample, weight: prob, utility });
                }
            }
        }
        Ok((PairGradient { s, rollouts, soft_cost: sc, cost }, fwd))
    }

    /// Gradient of the batch loss with respect to all parameters, and the
    /// step metrics, without touching the parameters or the baseline.
    pub fn gradient(&self, batch: &EpisodeBatch, env: &dyn Environment) -> Result<(GeneratorParams, StepMetrics, f64)> {
        let mut pairs = Vec::with_capacity(batch.pairs.len());
        for (idx, (q, cs)) in batch.pairs.iter().enumerate() {
            pairs.push(self.rollouts(q, cs, env, idx)?);
        }
        let mean_utility =
            pairs.iter().map(|(pg, _)| pg.rollouts.iter().map(|r| r.weight * r.utility).sum::<f64>()).sum::<f64>()
                / pairs.len() as f64;
        let baseline = self.baseline.unwrap_or(mean_utility);
        let scale = 1.0 / pairs.len() as f64;
        let mut grad = self.params.zeros_like();
        let mut loss = 0.0;
        let mut soft = 0.0;
        for (pg, fwd) in &pairs {
            let mut d_s = utility_gradient(&pg.s, &pg.rollouts, baseline);
            // descend on −u
            d_s.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
            d_s.add_scaled(&pg.cost, self.cfg.beta);
            grad.add_scaled(&backward(&self.params, fwd, &d_s)?, scale);
            let eu: f64 = pg.rollouts.iter().map(|r| r.weight * r.utility).sum();
            loss += scale * (-eu + self.cfg.beta * pg.soft_cost);
            soft += scale * pg.soft_cost;
        }
        if let Some(name) = grad.first_non_finite() {
            return Err(CardError::NonFiniteGradient(format!("step {}: tensor {name}", self.step)));
        }
        let metrics = StepMetrics { step: self.step, loss, mean_utility, soft_cost: soft, baseline };
        Ok((grad, metrics, baseline))
    }

    /// One gradient-descent update.
    pub fn step(&mut self, batch: &EpisodeBatch, env: &dyn Environment) -> Result<StepMetrics> {
        let (grad, mut metrics, baseline) = self.gradient(batch, env)?;
        let mut next = self.params.clone();
        next.add_scaled(&grad, -self.cfg.lr);
        if let Some(name) = next.first_non_finite() {
            return Err(CardError::NonFiniteGradient(format!("step {}: update overflowed {name}", self.step)));
        }
        self.params = next;
        let d = self.cfg.baseline_decay;
        let updated = d * baseline + (1.0 - d) * metrics.mean_utility;
        self.baseline = Some(updated);
        metrics.baseline = updated;
        self.step += 1;
        Ok(metrics)
    }
}

/// Single update as a free function; see [`Trainer::step`].
pub fn train_step(
    params: &GeneratorParams,
    baseline: Option<f64>,
    roster: &Roster,
    batch: &EpisodeBatch,
    env: &dyn Environment,
    cfg: &TrainConfig,
    cm: &CostModel,
) -> Result<(GeneratorParams, StepMetrics)> {
    let mut t = Trainer::new(params.clone(), roster, cfg.clone(), *cm)?;
    t.baseline = baseline;
    let m = t.step(batch, env)?;
    Ok((t.params, m))
}

/// `cfg.steps` updates over shuffled `pairs`, reshuffling every epoch.
/// `on_step` sees every step's metrics and the updated parameters.
pub fn train_with(
    params: GeneratorParams,
    roster: &Roster,
    pairs: &[(Query, ConditionSet)],
    env: &dyn Environment,
    cfg: &TrainConfig,
    cm: &CostModel,
    mut on_step: impl FnMut(&StepMetrics, &GeneratorParams) -> Result<()>,
) -> Result<(GeneratorParams, Vec<StepMetrics>)> {
    if pairs.is_empty() {
        return Err(CardError::Invalid("configuration set is empty".into()));
    }
    let mut trainer = Trainer::new(params, roster, cfg.clone(), *cm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x7368_7566));
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(pairs[order.pop().unwrap()].clone());
        }
        let m = trainer.step(&EpisodeBatch::new(batch)?, env)?;
        on_step(&m, &trainer.params)?;
        history.push(m);
    }
    Ok((trainer.params, history))
}

pub fn train(
    params: GeneratorParams,
    roster: &Roster,
    pairs: &[(Query, ConditionSet)],
    env: &dyn Environment,
    cfg: &TrainConfig,
    cm: &CostModel,
) -> Result<(GeneratorParams, Vec<StepMetrics>)> {
    train_with(params, roster, pairs, env, cfg, cm, |_, _| Ok(()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean utility of executing the thresholded topology.
    pub mean_utility: f64,
    pub mean_soft_cost: f64,
    pub mean_offdiag: f64,
    pub mean_edges: f64,
}

/// Executes the deterministic (thresholded) topology of every pair
/// `episodes` times with fixed seeds.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &GeneratorParams,
    roster: &Roster,
    pairs: &[(Query, ConditionSet)],
    env: &dyn Environment,
    anchor: AnchorKind,
    tau: f64,
    cm: &CostModel,
    episodes: usize,
) -> Result<Evaluation> {
    if pairs.is_empty() || episodes == 0 {
        return Err(CardError::Invalid("nothing to evaluate".into()));
    }
    let embedder = params.embedder()?;
    let anchor = AnchorTopology::new(anchor, roster.len())?;
    let (mut u, mut c, mut m, mut e) = (0.0, 0.0, 0.0, 0.0);
    for (idx, (q, cs)) in pairs.iter().enumerate() {
        let inputs = GeneratorInputs::build(&embedder, roster, cs, q)?;
        let s = forward(params, &inputs, &anchor)?.matrix().clone();
        let topo = CommTopology::from_matrix(&s, tau)?;
        for ep in 0..episodes {
            u += env.utility(q, cs, &topo, rollout_seed(0xe7a1, usize::MAX, idx, ep))?;
        }
        c += soft_cost(&s, &edge_cost_matrix(roster, cs, cm)?)?;
        let off = s.off_diagonal();
        m += off.iter().sum::<f64>() / off.len().max(1) as f64;
        e += topo.edges().len() as f64;
    }
    let np = pairs.len() as f64;
    Ok(Evaluation {
        mean_utility: u / (np * episodes as f64),
        mean_soft_cost: c / np,
        mean_offdiag: m / np,
        mean_edges: e / np,
    })
}
