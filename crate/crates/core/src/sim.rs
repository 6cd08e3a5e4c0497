//! Deterministic simulated agents, a synthetic multiple-choice task bank and
//! the scenario configuration sets used for training without LLM access.
//!
//! An agent answers correctly with probability
//! `clamp(difficulty × (base_quality + tool_bonus + help_bonus × c), 0, 0.98)`
//! where `c` is the number of its upstream messages carrying the correct
//! answer; otherwise it picks one of the wrong options uniformly.

use std::collections::HashMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{features, AgentProfile, ConditionFeature, ConditionSet, Query, Roster};
use crate::embedding::splitmix64;
use crate::error::{CardError, Result};
use crate::graph::CommTopology;
use crate::runtime::{normalize_answer, run_rounds, AgentExecutor, Aggregation, Message, RoundPrompts};
use crate::training::Environment;

pub const ALPHABET: [&str; 4] = ["A", "B", "C", "D"];
pub const MAX_P_CORRECT: f64 = 0.98;
pub const DEFAULT_HELP_BONUS: f64 = 0.15;
/// Bonus for tool-bearing agents when `tool_quality > 0.5`.
pub const TOOL_BONUS: f64 = 0.2;
pub const TASK_BANK_SIZE: usize = 64;
const TASK_BANK_SEED: u64 = 0x5eed_7a5c;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResponderSpec {
    pub base_quality: f64,
    pub tool_bonus: f64,
    pub help_bonus: f64,
}

impl ResponderSpec {
    pub fn new(base_quality: f64, tool_bonus: f64, help_bonus: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&base_quality) || !(0.0..=0.5).contains(&tool_bonus) || help_bonus < 0.0 {
            return Err(CardError::Invalid(format!(
                "responder spec out of range: base {base_quality}, tool {tool_bonus}, help {help_bonus}"
            )));
        }
        Ok(ResponderSpec { base_quality, tool_bonus, help_bonus })
    }

    /// Reads `model_quality` and `tool_quality` from the agent's conditions.
    pub fn from_conditions(profile: &AgentProfile, conditions: &ConditionSet) -> Result<Self> {
        let base = conditions
            .scalar(&profile.id, features::MODEL_QUALITY)
            .ok_or_else(|| CardError::Invalid(format!("agent `{}` has no scalar model_quality", profile.id)))?;
        let tool_quality = conditions.scalar(&profile.id, features::TOOL_QUALITY).unwrap_or(0.0);
        let tool_bonus = if profile.has_tools() && tool_quality > 0.5 { TOOL_BONUS } else { 0.0 };
        Self::new(base.clamp(0.0, 1.0), tool_bonus, DEFAULT_HELP_BONUS)
    }

    pub fn p_correct(&self, difficulty: f64, correct_upstream: usize) -> f64 {
        let raw = difficulty * (self.base_quality + self.tool_bonus + self.help_bonus * correct_upstream as f64);
        raw.clamp(0.0, MAX_P_CORRECT)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTask {
    pub id: String,
    pub query: String,
    pub answer: String,
    /// Multiplies every correctness probability; 1.0 leaves them unchanged.
    pub difficulty: f64,
}

impl SimTask {
    pub fn new(id: impl Into<String>, query: impl Into<String>, answer: &str, difficulty: f64) -> Result<Self> {
        if !ALPHABET.contains(&answer) {
            return Err(CardError::Invalid(format!("answer `{answer}` is not in the alphabet")));
        }
        if !(0.0..=1.0).contains(&difficulty) {
            return Err(CardError::Invalid(format!("difficulty {difficulty} outside [0, 1]")));
        }
        Ok(SimTask { id: id.into(), query: query.into(), answer: answer.to_string(), difficulty })
    }

    pub fn to_query(&self) -> Query {
        Query { id: self.id.clone(), text: self.query.clone(), ground_truth: Some(self.answer.clone()) }
    }
}

/// The fixed bank of synthetic multiple-choice tasks.
pub fn task_bank() -> Vec<SimTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(TASK_BANK_SEED);
    (0..TASK_BANK_SIZE)
        .map(|i| {
            let answer = ALPHABET[rng.gen_range(0..ALPHABET.len())];
            let difficulty = rng.gen_range(0.8..=1.0);
            SimTask::new(
                format!("task-{i:02}"),
                format!("Question {i}: pick the correct option among A, B, C and D."),
                answer,
                difficulty,
            )
            .expect("bank tasks are valid")
        })
        .collect()
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| splitmix64(h ^ p))
}

fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Simulated agents for one task.
#[derive(Clone, Debug)]
pub struct SimExecutor {
    specs: Vec<ResponderSpec>,
    task: SimTask,
    seed: u64,
}

pub fn sim_executor(specs: Vec<ResponderSpec>, task: SimTask, seed: u64) -> SimExecutor {
    SimExecutor { specs, task, seed }
}

impl SimExecutor {
    /// The answer agent `agent` gives in `round` when `correct_upstream` of
    /// its upstream messages are correct. Pure in all arguments.
    pub fn answer(&self, agent: usize, round: usize, correct_upstream: usize) -> &'static str {
        let key = mix(&[self.seed, str_key(&self.task.id), agent as u64, round as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let draw: f64 = rng.gen();
        let wrong_pick = rng.gen_range(0..ALPHABET.len() - 1);
        let p = self.specs[agent].p_correct(self.task.difficulty, correct_upstream);
        let correct = ALPHABET.iter().position(|a| *a == self.task.answer).unwrap();
        if draw < p {
            ALPHABET[correct]
        } else {
            ALPHABET.iter().enumerate().filter(|&(i, _)| i != correct).map(|(_, a)| *a).nth(wrong_pick).unwrap()
        }
    }
}

impl AgentExecutor for SimExecutor {
    fn respond(
        &self,
        agent: usize,
        round: usize,
        _prompts: &RoundPrompts,
        upstream: &[Message],
    ) -> std::result::Result<String, String> {
        if agent >= self.specs.len() {
            return Err(format!("no responder spec for agent {agent}"));
        }
        let truth = normalize_answer(&self.task.answer);
        let mut senders: Vec<usize> =
            upstream.iter().filter(|m| normalize_answer(&m.content) == truth).map(|m| m.from).collect();
        senders.sort_unstable();
        senders.dedup();
        Ok(self.answer(agent, round, senders.len()).to_string())
    }
}

pub fn sim_utility(answer: &str, task: &SimTask) -> f64 {
    if normalize_answer(answer) == normalize_answer(&task.answer) {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    WeakModel,
    StrongModel,
    WeakTool,
    StrongTool,
    Mixed,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::WeakModel, Scenario::StrongModel, Scenario::WeakTool, Scenario::StrongTool, Scenario::Mixed];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::WeakModel => "weak-model",
            Scenario::StrongModel => "strong-model",
            Scenario::WeakTool => "weak-tool",
            Scenario::StrongTool => "strong-tool",
            Scenario::Mixed => "mixed",
        }
    }
}

impl FromStr for Scenario {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| CardError::Invalid(format!("unknown scenario `{s}`")))
    }
}

/// Five agents with the MMLU-style roles; the searcher carries a tool.
pub fn default_roster() -> Roster {
    let agent = |id: &str, role: &str, plugins: &[&str]| {
        AgentProfile::new(id, role, "gpt-4o-mini", plugins.iter().map(|p| p.to_string()).collect()).unwrap()
    };
    Roster::new(vec![
        agent("expert", "Knowlegable Expert", &[]),
        agent("searcher", "Searcher", &["Google"]),
        agent("philosopher", "Philosopher", &[]),
        agent("mathematician", "Mathematician", &[]),
        agent("critic", "Critic", &[]),
    ])
    .unwrap()
}

pub const WEAK_MODEL_QUALITY: f64 = 0.35;
pub const STRONG_MODEL_QUALITY: f64 = 0.85;
const MID_MODEL_QUALITY: f64 = 0.55;
const WEAK_TOOL_QUALITY: f64 = 0.3;
const STRONG_TOOL_QUALITY: f64 = 0.9;
const NEUTRAL_TOOL_QUALITY: f64 = 0.7;

/// (quality, input price, output price) per million tokens.
fn model_tier(quality: f64) -> (f64, f64, f64) {
    if quality >= 0.75 {
        (quality, 2.5, 10.0)
    } else if quality >= 0.5 {
        (quality, 0.9, 0.9)
    } else {
        (quality, 0.15, 0.6)
    }
}

fn uniform_conditions(roster: &Roster, quality: f64, tool_quality: f64) -> ConditionSet {
    let qualities = vec![quality; roster.len()];
    per_agent_conditions(roster, &qualities, tool_quality)
}

fn per_agent_conditions(roster: &Roster, qualities: &[f64], tool_quality: f64) -> ConditionSet {
    let mut cs = ConditionSet::new().with_global(ConditionFeature::scalar(features::TOOL_QUALITY, tool_quality));
    for (agent, &q) in roster.iter().zip(qualities) {
        let (q, input, output) = model_tier(q);
        cs.set_agent(&agent.id, ConditionFeature::scalar(features::MODEL_QUALITY, q));
        cs.set_agent(&agent.id, ConditionFeature::scalar(features::INPUT_PRICE, input));
        cs.set_agent(&agent.id, ConditionFeature::scalar(features::OUTPUT_PRICE, output));
    }
    cs
}

/// Conditions realizing one pure scenario over `roster`.
pub fn scenario_conditions(roster: &Roster, scenario: Scenario) -> ConditionSet {
    match scenario {
        Scenario::WeakModel => uniform_conditions(roster, WEAK_MODEL_QUALITY, NEUTRAL_TOOL_QUALITY),
        Scenario::StrongModel => uniform_conditions(roster, STRONG_MODEL_QUALITY, NEUTRAL_TOOL_QUALITY),
        Scenario::WeakTool => uniform_conditions(roster, MID_MODEL_QUALITY, WEAK_TOOL_QUALITY),
        Scenario::StrongTool => uniform_conditions(roster, MID_MODEL_QUALITY, STRONG_TOOL_QUALITY),
        Scenario::Mixed => {
            let qualities: Vec<f64> =
                (0..roster.len()).map(|i| if i % 2 == 0 { WEAK_MODEL_QUALITY } else { STRONG_MODEL_QUALITY }).collect();
            per_agent_conditions(roster, &qualities, NEUTRAL_TOOL_QUALITY)
        }
    }
}

/// Roster, (query, conditions) pairs and the task bank behind them.
#[derive(Clone, Debug)]
pub struct ConfigSet {
    pub scenario: Scenario,
    pub roster: Roster,
    pub pairs: Vec<(Query, ConditionSet)>,
    pub tasks: Vec<SimTask>,
}

/// Pure scenarios pair every task with the same conditions. `Mixed` cycles
/// tasks through the four pure scenarios plus a heterogeneous roster where
/// weak and strong models alternate.
pub fn make_config_set(scenario: Scenario) -> ConfigSet {
    let roster = default_roster();
    let tasks = task_bank();
    let cycle = [Scenario::WeakModel, Scenario::StrongModel, Scenario::WeakTool, Scenario::StrongTool, Scenario::Mixed];
    let pairs = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let sc = if scenario == Scenario::Mixed { cycle[i % cycle.len()] } else { scenario };
            (t.to_query(), scenario_conditions(&roster, sc))
        })
        .collect();
    ConfigSet { scenario, roster, pairs, tasks }
}

/// Utility provider backed by simulated agents.
#[derive(Clone, Debug)]
pub struct SimEnvironment {
    roster: Roster,
    tasks: HashMap<String, SimTask>,
    pub k_rounds: usize,
    pub aggregation: Aggregation,
}

impl SimEnvironment {
    pub fn new(roster: Roster, tasks: &[SimTask], k_rounds: usize, aggregation: Aggregation) -> Self {
        SimEnvironment {
            roster,
            tasks: tasks.iter().map(|t| (t.id.clone(), t.clone())).collect(),
            k_rounds,
            aggregation,
        }
    }

    pub fn from_config_set(set: &ConfigSet, k_rounds: usize) -> Self {
        Self::new(set.roster.clone(), &set.tasks, k_rounds, Aggregation::Vote)
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn task(&self, query: &Query) -> Result<&SimTask> {
        self.tasks
            .get(&query.id)
            .ok_or_else(|| CardError::Invalid(format!("query `{}` is not in the task bank", query.id)))
    }

    pub fn executor(&self, query: &Query, conditions: &ConditionSet, seed: u64) -> Result<SimExecutor> {
        let specs =
            self.roster.iter().map(|a| ResponderSpec::from_conditions(a, conditions)).collect::<Result<Vec<_>>>()?;
        Ok(sim_executor(specs, self.task(query)?.clone(), seed))
    }
}

impl Environment for SimEnvironment {
    fn utility(&self, query: &Query, conditions: &ConditionSet, topology: &CommTopology, seed: u64) -> Result<f64> {
        let exec = self.executor(query, conditions, seed)?;
        let transcript = run_rounds(topology, query, &exec, self.k_rounds, self.aggregation)?;
        Ok(sim_utility(&transcript.final_answer, self.task(query)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(difficulty: f64) -> SimTask {
        SimTask::new("t", "q", "B", difficulty).unwrap()
    }

    #[test]
    fn saturated_agent_is_correct_98_percent() {
        let spec = ResponderSpec::new(1.0, 0.0, DEFAULT_HELP_BONUS).unwrap();
        let draws = 100_000;
        let hits = (0..draws).filter(|&seed| sim_executor(vec![spec], task(1.0), seed).answer(0, 1, 0) == "B").count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.98).abs() < 0.005, "{freq}");
    }

    #[test]
    fn hopeless_agent_answers_uniformly_wrong() {
        let spec = ResponderSpec::new(0.0, 0.0, 0.0).unwrap();
        let mut counts = HashMap::new();
        for seed in 0..30_000 {
            *counts.entry(sim_executor(vec![spec], task(1.0), seed).answer(0, 1, 0)).or_insert(0usize) += 1;
        }
        assert!(!counts.contains_key("B"));
        for a in ["A", "C", "D"] {
            let f = counts[a] as f64 / 30_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.015, "{a}: {f}");
        }
    }

    #[test]
    fn help_bonus_is_additive_then_capped() {
        let spec = ResponderSpec::new(0.2, 0.0, 0.15).unwrap();
        assert!((spec.p_correct(1.0, 2) - spec.p_correct(1.0, 0) - 0.30).abs() < 1e-12);
        assert_eq!(spec.p_correct(1.0, 10), MAX_P_CORRECT);
        assert!((spec.p_correct(0.5, 0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn tool_bonus_needs_tools_and_quality() {
        let roster = default_roster();
        let good = scenario_conditions(&roster, Scenario::StrongTool);
        let bad = scenario_conditions(&roster, Scenario::WeakTool);
        let searcher = roster.get(1).unwrap();
        let critic = roster.get(4).unwrap();
        assert_eq!(ResponderSpec::from_conditions(searcher, &good).unwrap().tool_bonus, TOOL_BONUS);
        assert_eq!(ResponderSpec::from_conditions(searcher, &bad).unwrap().tool_bonus, 0.0);
        assert_eq!(ResponderSpec::from_conditions(critic, &good).unwrap().tool_bonus, 0.0);
    }

    #[test]
    fn utility_normalizes() {
        let t = task(1.0);
        assert_eq!(sim_utility("B", &t), 1.0);
        assert_eq!(sim_utility(" b ", &t), 1.0);
        assert_eq!(sim_utility("Z", &t), 0.0);
        assert_eq!(sim_utility("C", &t), 0.0);
    }

    #[test]
    fn scenarios_realize_their_qualities() {
        let quality = |sc: Scenario| -> Vec<f64> {
            let set = make_config_set(sc);
            set.pairs
                .iter()
                .flat_map(|(_, cs)| {
                    set.roster.iter().map(|a| cs.scalar(&a.id, "model_quality").unwrap()).collect::<Vec<_>>()
                })
                .collect()
        };
        assert!(quality(Scenario::WeakModel).iter().all(|&q| q == 0.35));
        assert!(quality(Scenario::StrongModel).iter().all(|&q| q == 0.85));
        let mut mixed = quality(Scenario::Mixed);
        mixed.sort_by(f64::total_cmp);
        mixed.dedup();
        assert!(mixed.len() >= 2);
        let set = make_config_set(Scenario::Mixed);
        assert_eq!(set.pairs.len(), TASK_BANK_SIZE);
        assert_eq!(set.roster.len(), 5);
        for (_, cs) in &set.pairs {
            cs.validate(&set.roster).unwrap();
        }
    }

    #[test]
    fn simulation_is_reproducible() {
        let a = make_config_set(Scenario::Mixed);
        let b = make_config_set(Scenario::Mixed);
        assert_eq!(a.tasks, b.tasks);
        assert_eq!(a.pairs, b.pairs);
        let env = SimEnvironment::from_config_set(&a, 1);
        let topo = CommTopology::empty(5);
        let (q, cs) = &a.pairs[3];
        let u: Vec<f64> = (0..20).map(|s| env.utility(q, cs, &topo, s).unwrap()).collect();
        let v: Vec<f64> = (0..20).map(|s| env.utility(q, cs, &topo, s).unwrap()).collect();
        assert_eq!(u, v);
        assert!(Scenario::from_str("strong-tool").is_ok());
        assert!(Scenario::from_str("medium").is_err());
    }

    #[test]
    fn connected_topologies_help_weak_models() {
        use crate::graph::{anchor_adjacency, AnchorKind, AnchorTopology};
        let set = make_config_set(Scenario::WeakModel);
        let env = SimEnvironment::from_config_set(&set, 1);
        let full = anchor_adjacency(&AnchorTopology::new(AnchorKind::FullyConnected, 5).unwrap());
        let dense = CommTopology::from_matrix(&full, 0.5).unwrap();
        let empty = CommTopology::empty(5);
        let episodes = 10_000u64;
        let mean = |topo: &CommTopology| {
            (0..episodes)
                .map(|e| {
                    let (q, cs) = &set.pairs[(e as usize) % set.pairs.len()];
                    env.utility(q, cs, topo, e).unwrap()
                })
                .sum::<f64>()
                / episodes as f64
        };
        let (d, e) = (mean(&dense), mean(&empty));
        assert!(d >= e + 0.02, "dense {d} vs empty {e}");
    }
}
