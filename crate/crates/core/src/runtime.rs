//! K-round message propagation over a communication topology.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::Query;
use crate::error::{CardError, Result};
use crate::generator::hex_digest;
use crate::graph::CommTopology;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub round: usize,
    pub from: usize,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPrompts {
    pub system: String,
    pub user: String,
}

impl RoundPrompts {
    fn build(agent: usize, round: usize, k: usize, query: &Query, upstream: &[Message]) -> Self {
        let system =
            format!("You are agent {agent} in a collaborating team. This is communication round {round} of {k}.");
        let mut user = query.text.clone();
        if !upstream.is_empty() {
            user.push_str("\n\nMessages from upstream agents:");
            for m in upstream {
                write!(user, "\n[agent {}] {}", m.from, m.content).unwrap();
            }
        }
        RoundPrompts { system, user }
    }
}

/// Anything that can play an agent: an LLM client, a simulator, a test spy.
pub trait AgentExecutor {
    /// Produce agent `agent`'s round-`round` response. `upstream` holds the
    /// same-round responses of the agent's in-neighbors, ordered by sender.
    fn respond(
        &self,
        agent: usize,
        round: usize,
        prompts: &RoundPrompts,
        upstream: &[Message],
    ) -> std::result::Result<String, String>;
}

impl<F> AgentExecutor for F
where
    F: Fn(usize, usize, &RoundPrompts, &[Message]) -> std::result::Result<String, String>,
{
    fn respond(
        &self,
        agent: usize,
        round: usize,
        prompts: &RoundPrompts,
        upstream: &[Message],
    ) -> std::result::Result<String, String> {
        self(agent, round, prompts, upstream)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Vote,
    SelectLast,
    ConcatSummary,
}

impl FromStr for Aggregation {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vote" => Ok(Aggregation::Vote),
            "select-last" => Ok(Aggregation::SelectLast),
            "concat-summary" => Ok(Aggregation::ConcatSummary),
            other => Err(CardError::Invalid(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

/// Trim and lowercase; the key used for vote counting and answer matching.
pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Combines the final-round responses (indexed by agent) into one answer.
///
/// * `Vote`: most frequent normalized answer, ties to the lexicographically
///   smallest; returns the first matching response, trimmed.
/// * `SelectLast`: response of the last agent in `schedule`.
/// * `ConcatSummary`: responses in schedule order joined by a separator.
pub fn aggregate(responses: &[String], schedule: &[usize], mode: Aggregation) -> Result<String> {
    if responses.is_empty() {
        return Err(CardError::EmptyResponses);
    }
    match mode {
        Aggregation::Vote => {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for r in responses {
                *counts.entry(normalize_answer(r)).or_default() += 1;
            }
            let best = counts.values().copied().max().unwrap_or(0);
            // BTreeMap iterates keys in order, so the first hit is the smallest.
            let winner = counts.iter().find(|(_, &c)| c == best).map(|(k, _)| k.clone()).unwrap();
            Ok(responses.iter().find(|r| normalize_answer(r) == winner).map(|r| r.trim().to_string()).unwrap())
        }
        Aggregation::SelectLast => {
            let last = schedule.last().copied().unwrap_or(responses.len() - 1);
            responses.get(last).cloned().ok_or(CardError::IndexOutOfRange { index: last, n: responses.len() })
        }
        Aggregation::ConcatSummary => {
            let order: Vec<usize> =
                if schedule.len() == responses.len() { schedule.to_vec() } else { (0..responses.len()).collect() };
            Ok(order
                .iter()
                .map(|&i| format!("[agent {i}] {}", responses[i].trim()))
                .collect::<Vec<_>>()
                .join("\n---\n"))
        }
    }
}

/// Record of one execution. `per_round[t]` lists round `t + 1` messages in
/// execution (schedule) order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Transcript {
    pub schedule: Vec<usize>,
    pub per_round: Vec<Vec<Message>>,
    pub prompts: Vec<Vec<RoundPrompts>>,
    pub final_answer: String,
}

impl Transcript {
    pub fn message(&self, round: usize, agent: usize) -> Option<&Message> {
        self.per_round.get(round.checked_sub(1)?)?.iter().find(|m| m.from == agent)
    }

    /// Final-round responses indexed by agent.
    pub fn final_responses(&self, n: usize) -> Vec<String> {
        let mut out = vec![String::new(); n];
        if let Some(last) = self.per_round.last() {
            for m in last {
                out[m.from] = m.content.clone();
            }
        }
        out
    }

    /// Tab-separated log: one record per (round, agent) in execution order,
    /// with truncated SHA-256 digests of both prompts, then the final answer.
    pub fn export(&self) -> String {
        let mut out = String::from("round\tagent\tsystem_digest\tuser_digest\tresponse\n");
        for (msgs, prompts) in self.per_round.iter().zip(&self.prompts) {
            for (m, p) in msgs.iter().zip(prompts) {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    m.round,
                    m.from,
                    &hex_digest(p.system.as_bytes())[..16],
                    &hex_digest(p.user.as_bytes())[..16],
                    escape(&m.content)
                )
                .unwrap();
            }
        }
        writeln!(out, "final\t\t\t\t{}", escape(&self.final_answer)).unwrap();
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n").replace('\r', "\\r")
}

/// Executes `k` rounds. In every round agents run in schedule order and see
/// their in-neighbors' responses from the same round.
pub fn run_rounds(
    topology: &CommTopology,
    query: &Query,
    executor: &dyn AgentExecutor,
    k: usize,
    mode: Aggregation,
) -> Result<Transcript> {
    if k == 0 {
        return Err(CardError::Invalid("at least one round is required".into()));
    }
    let n = topology.n();
    let in_neighbors: Vec<Vec<usize>> = (0..n).map(|j| topology.in_neighbors(j)).collect::<Result<_>>()?;
    let mut transcript = Transcript { schedule: topology.schedule().to_vec(), ..Transcript::default() };
    for round in 1..=k {
        let mut current: Vec<Option<Message>> = vec![None; n];
        transcript.per_round.push(Vec::with_capacity(n));
        transcript.prompts.push(Vec::with_capacity(n));
        for &agent in topology.schedule() {
            let upstream: Vec<Message> = in_neighbors[agent]
                .iter()
                .map(|&i| current[i].clone().expect("schedule runs producers first"))
                .collect();
            let prompts = RoundPrompts::build(agent, round, k, query, &upstream);
            match executor.respond(agent, round, &prompts, &upstream) {
                Ok(content) => {
                    let msg = Message { round, from: agent, content };
                    current[agent] = Some(msg.clone());
                    transcript.per_round.last_mut().unwrap().push(msg);
                    transcript.prompts.last_mut().unwrap().push(prompts);
                }
                Err(message) => {
                    return Err(CardError::ExecutorFailure { agent, round, message, partial: Box::new(transcript) })
                }
            }
        }
    }
    transcript.final_answer = aggregate(&transcript.final_responses(n), topology.schedule(), mode)?;
    Ok(transcript)
}
