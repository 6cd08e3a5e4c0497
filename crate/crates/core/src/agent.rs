//! Agents, their runtime conditions, queries, and the text templates that
//! turn each of them into embeddable strings.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CardError, Result};

/// Static attributes of one agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: String,
    pub role: String,
    pub base_model: String,
    #[serde(default)]
    pub plugins: Vec<String>,
}

impl AgentProfile {
    pub fn new(
        id: impl Into<String>,
        role: impl Into<String>,
        base_model: impl Into<String>,
        plugins: Vec<String>,
    ) -> Result<Self> {
        let profile = AgentProfile { id: id.into(), role: role.into(), base_model: base_model.into(), plugins };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(CardError::Invalid("agent id must be nonempty".into()));
        }
        if self.role.trim().is_empty() {
            return Err(CardError::Invalid(format!("agent `{}` has an empty role", self.id)));
        }
        Ok(())
    }

    pub fn has_tools(&self) -> bool {
        !self.plugins.is_empty()
    }
}

/// Ordered list of agents. Index in the roster is the agent's node index.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Roster {
    agents: Vec<AgentProfile>,
}

impl Roster {
    pub fn new(agents: Vec<AgentProfile>) -> Result<Self> {
        let mut seen = HashSet::new();
        for a in &agents {
            a.validate()?;
            if !seen.insert(a.id.as_str()) {
                return Err(CardError::Invalid(format!("duplicate agent id `{}`", a.id)));
            }
        }
        Ok(Roster { agents })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn agents(&self) -> &[AgentProfile] {
        &self.agents
    }

    pub fn get(&self, index: usize) -> Option<&AgentProfile> {
        self.agents.get(index)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AgentProfile> {
        self.agents.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Scalar(f64),
    Label(String),
}

impl FeatureValue {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            FeatureValue::Scalar(v) => Some(*v),
            FeatureValue::Label(_) => None,
        }
    }

    fn render(&self, out: &mut String) {
        match self {
            FeatureValue::Scalar(v) => write!(out, "{v:.4}").unwrap(),
            FeatureValue::Label(s) => out.push_str(s),
        }
    }
}

/// One runtime environment feature, e.g. `model_quality = 0.35`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionFeature {
    pub name: String,
    pub value: FeatureValue,
}

impl ConditionFeature {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        ConditionFeature { name: name.into(), value: FeatureValue::Scalar(value) }
    }

    pub fn label(name: impl Into<String>, value: impl Into<String>) -> Self {
        ConditionFeature { name: name.into(), value: FeatureValue::Label(value.into()) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(CardError::Invalid("condition feature name must be nonempty".into()));
        }
        if let FeatureValue::Scalar(v) = self.value {
            if !v.is_finite() {
                return Err(CardError::Invalid(format!("feature `{}` is not finite", self.name)));
            }
        }
        Ok(())
    }
}

/// Well-known feature names.
pub mod features {
    pub const MODEL_QUALITY: &str = "model_quality";
    pub const TOOL_QUALITY: &str = "tool_quality";
    pub const INPUT_PRICE: &str = "input_price";
    pub const OUTPUT_PRICE: &str = "output_price";
    pub const EVALUATION_INFO: &str = "evaluation_info";
}

/// Runtime conditions for a roster. Per-agent features shadow global ones of
/// the same name.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditionSet {
    #[serde(default)]
    pub per_agent: BTreeMap<String, Vec<ConditionFeature>>,
    #[serde(default)]
    pub global: Vec<ConditionFeature>,
}

impl ConditionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_global(mut self, feature: ConditionFeature) -> Self {
        self.set_global(feature);
        self
    }

    pub fn with_agent(mut self, agent: &str, feature: ConditionFeature) -> Self {
        self.set_agent(agent, feature);
        self
    }

    pub fn set_global(&mut self, feature: ConditionFeature) {
        upsert(&mut self.global, feature);
    }

    pub fn set_agent(&mut self, agent: &str, feature: ConditionFeature) {
        upsert(self.per_agent.entry(agent.to_string()).or_default(), feature);
    }

    pub fn knows(&self, agent_id: &str) -> bool {
        self.per_agent.contains_key(agent_id) || !self.global.is_empty()
    }

    /// Merged view for one agent, keyed (and therefore ordered) by feature name.
    pub fn merged(&self, agent_id: &str) -> Result<BTreeMap<&str, &FeatureValue>> {
        let own = self.per_agent.get(agent_id);
        if own.is_none() && self.global.is_empty() {
            return Err(CardError::UnknownAgent(agent_id.to_string()));
        }
        let mut merged = BTreeMap::new();
        for f in self.global.iter().chain(own.into_iter().flatten()) {
            merged.insert(f.name.as_str(), &f.value);
        }
        Ok(merged)
    }

    pub fn value(&self, agent_id: &str, name: &str) -> Option<&FeatureValue> {
        self.per_agent
            .get(agent_id)
            .and_then(|fs| fs.iter().rev().find(|f| f.name == name))
            .or_else(|| self.global.iter().rev().find(|f| f.name == name))
            .map(|f| &f.value)
    }

    pub fn scalar(&self, agent_id: &str, name: &str) -> Option<f64> {
        self.value(agent_id, name).and_then(FeatureValue::as_scalar)
    }

    /// Checks that every keyed agent exists in the roster, that feature names
    /// are unique within one list, and that every roster agent is covered.
    pub fn validate(&self, roster: &Roster) -> Result<()> {
        for (id, feats) in &self.per_agent {
            if roster.index_of(id).is_none() {
                return Err(CardError::UnknownAgent(id.clone()));
            }
            check_unique(feats, id)?;
        }
        check_unique(&self.global, "global")?;
        for a in roster.iter() {
            if !self.knows(&a.id) {
                return Err(CardError::UnknownAgent(a.id.clone()));
            }
        }
        Ok(())
    }
}

fn upsert(list: &mut Vec<ConditionFeature>, feature: ConditionFeature) {
    match list.iter_mut().find(|f| f.name == feature.name) {
        Some(slot) => *slot = feature,
        None => list.push(feature),
    }
}

fn check_unique(feats: &[ConditionFeature], owner: &str) -> Result<()> {
    let mut names = HashSet::new();
    for f in feats {
        f.validate()?;
        if !names.insert(f.name.as_str()) {
            return Err(CardError::Invalid(format!("feature `{}` appears twice for {owner}", f.name)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub ground_truth: Option<String>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let q = Query { id: id.into(), text: text.into(), ground_truth: None };
        if q.text.trim().is_empty() {
            return Err(CardError::Invalid("query text must be nonempty".into()));
        }
        Ok(q)
    }

    pub fn with_ground_truth(mut self, answer: impl Into<String>) -> Self {
        self.ground_truth = Some(answer.into());
        self
    }
}

pub fn verbalize_profile(profile: &AgentProfile) -> String {
    let mut out = String::new();
    write!(out, "Agent role: {}. Base model: {}. ", profile.role, profile.base_model).unwrap();
    if profile.plugins.is_empty() {
        out.push_str("Tools: no tools available.");
    } else {
        write!(out, "Tools: {}.", profile.plugins.join(", ")).unwrap();
    }
    out
}

/// Renders the merged conditions of one agent as `name = value` clauses in
/// lexicographic name order.
pub fn verbalize_condition(agent_id: &str, conditions: &ConditionSet) -> Result<String> {
    let merged = conditions.merged(agent_id)?;
    let mut out = String::from("Runtime conditions:");
    if merged.is_empty() {
        out.push_str(" none.");
        return Ok(out);
    }
    for (i, (name, value)) in merged.iter().enumerate() {
        out.push_str(if i == 0 { " " } else { "; " });
        out.push_str(name);
        out.push_str(" = ");
        value.render(&mut out);
    }
    out.push('.');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(role: &str, base: &str, plugins: &[&str]) -> AgentProfile {
        AgentProfile::new("a", role, base, plugins.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn empty_plugins_get_explicit_clause() {
        let text = verbalize_profile(&profile("Critic", "m", &[]));
        assert!(text.contains("Critic"));
        assert!(text.contains("Base model: m."));
        assert!(text.contains("no tools"));
    }

    #[test]
    fn profile_text_is_deterministic() {
        let p = profile("Searcher", "gpt-4o-mini", &["Google"]);
        assert_eq!(verbalize_profile(&p), verbalize_profile(&p.clone()));
    }

    #[test]
    fn profile_text_mentions_every_slot() {
        let text = verbalize_profile(&profile("Searcher", "gpt-4o-mini", &["Google"]));
        for token in ["Searcher", "gpt-4o-mini", "Google"] {
            assert!(text.contains(token), "{token} missing from {text}");
        }
        assert!(!text.contains("no tools"));
    }

    #[test]
    fn single_global_feature() {
        let cs = ConditionSet::new().with_global(ConditionFeature::scalar("tool_quality", 0.9));
        let mut cs = cs;
        cs.per_agent.insert("a".into(), vec![]);
        assert_eq!(verbalize_condition("a", &cs).unwrap(), "Runtime conditions: tool_quality = 0.9000.");
    }

    #[test]
    fn agent_feature_overrides_global() {
        let cs = ConditionSet::new()
            .with_global(ConditionFeature::scalar("tool_quality", 0.9))
            .with_agent("a", ConditionFeature::scalar("tool_quality", 0.3));
        let text = verbalize_condition("a", &cs).unwrap();
        assert!(text.contains("0.3000"));
        assert!(!text.contains("0.9000"));
        assert_eq!(cs.scalar("a", "tool_quality"), Some(0.3));
        assert_eq!(cs.scalar("zzz", "tool_quality"), Some(0.9));
    }

    #[test]
    fn features_render_in_name_order() {
        let cs = ConditionSet::new()
            .with_agent("a", ConditionFeature::scalar("b", 1.0))
            .with_agent("a", ConditionFeature::scalar("a", 2.0));
        let text = verbalize_condition("a", &cs).unwrap();
        assert_eq!(text, "Runtime conditions: a = 2.0000; b = 1.0000.");
    }

    #[test]
    fn unknown_agent_without_globals() {
        let cs = ConditionSet::new().with_agent("a", ConditionFeature::scalar("x", 1.0));
        assert!(matches!(verbalize_condition("b", &cs), Err(CardError::UnknownAgent(id)) if id == "b"));
    }

    #[test]
    fn categorical_values_render_verbatim() {
        let cs = ConditionSet::new().with_agent("a", ConditionFeature::label("evaluation_info", "MMLU 0.82"));
        assert_eq!(verbalize_condition("a", &cs).unwrap(), "Runtime conditions: evaluation_info = MMLU 0.82.");
    }

    #[test]
    fn changing_a_value_changes_text() {
        let base = ConditionSet::new().with_agent("a", ConditionFeature::scalar("x", 0.5));
        let bumped = ConditionSet::new().with_agent("a", ConditionFeature::scalar("x", 0.5001));
        assert_ne!(verbalize_condition("a", &base).unwrap(), verbalize_condition("a", &bumped).unwrap());
    }

    #[test]
    fn roster_rejects_duplicates_and_blank_roles() {
        let a = AgentProfile::new("x", "r", "m", vec![]).unwrap();
        assert!(Roster::new(vec![a.clone(), a]).is_err());
        assert!(AgentProfile::new("y", " ", "m", vec![]).is_err());
        assert!(AgentProfile::new("", "r", "m", vec![]).is_err());
    }

    #[test]
    fn validate_catches_keys_outside_roster() {
        let roster = Roster::new(vec![AgentProfile::new("x", "r", "m", vec![]).unwrap()]).unwrap();
        let cs = ConditionSet::new().with_agent("ghost", ConditionFeature::scalar("q", 1.0));
        assert!(matches!(cs.validate(&roster), Err(CardError::UnknownAgent(_))));
        let ok = ConditionSet::new().with_global(ConditionFeature::scalar("q", 1.0));
        ok.validate(&roster).unwrap();
        let mut dup = ConditionSet::new();
        dup.per_agent.insert("x".into(), vec![ConditionFeature::scalar("q", 1.0), ConditionFeature::scalar("q", 2.0)]);
        assert!(dup.validate(&roster).is_err());
    }
}
