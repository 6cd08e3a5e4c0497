//! Roster, conditions and cost settings as a TOML document.
//!
//! ```toml
//! [[agents]]
//! id = "expert"
//! role = "Knowlegable Expert"
//! base_model = "gpt-4o-mini"
//! plugins = []
//!
//! [conditions.global]
//! tool_quality = 0.7
//!
//! [conditions.agents.expert]
//! model_quality = 0.35
//! input_price = 0.15
//! output_price = 0.6
//!
//! [cost]
//! tokens_per_message = 512
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentProfile, ConditionFeature, ConditionSet, FeatureValue, Roster};
use crate::error::{CardError, Result};
use crate::training::CostModel;

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConditions {
    #[serde(default)]
    global: BTreeMap<String, FeatureValue>,
    #[serde(default)]
    agents: BTreeMap<String, BTreeMap<String, FeatureValue>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgent {
    id: String,
    role: String,
    base_model: String,
    #[serde(default)]
    plugins: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    tokens_per_message: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    agents: Vec<RawAgent>,
    #[serde(default)]
    conditions: RawConditions,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost: Option<RawCost>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub roster: Roster,
    pub conditions: ConditionSet,
    pub cost: CostModel,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl Manifest {
    pub fn new(roster: Roster, conditions: ConditionSet, cost: CostModel) -> Result<Self> {
        conditions.validate(&roster)?;
        Ok(Manifest { roster, conditions, cost })
    }

    /// Syntax errors carry line and column; semantic ones are validation
    /// errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let raw: RawManifest = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            CardError::parse(origin, line, column, e.message().to_string())
        })?;
        let mut agents = Vec::with_capacity(raw.agents.len());
        for a in raw.agents {
            agents.push(AgentProfile::new(a.id, a.role, a.base_model, a.plugins)?);
        }
        let roster = Roster::new(agents)?;
        let mut conditions = ConditionSet::new();
        for (name, value) in raw.conditions.global {
            let f = ConditionFeature { name, value };
            f.validate()?;
            conditions.set_global(f);
        }
        for (agent, feats) in raw.conditions.agents {
            for (name, value) in feats {
                let f = ConditionFeature { name, value };
                f.validate()?;
                conditions.set_agent(&agent, f);
            }
        }
        let cost = match raw.cost {
            Some(c) => CostModel::new(c.tokens_per_message)?,
            None => CostModel::default(),
        };
        Manifest::new(roster, conditions, cost)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CardError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        let mut agents = BTreeMap::new();
        for (id, feats) in &self.conditions.per_agent {
            agents.insert(id.clone(), feats.iter().map(|f| (f.name.clone(), f.value.clone())).collect());
        }
        let raw = RawManifest {
            agents: self
                .roster
                .iter()
                .map(|a| RawAgent {
                    id: a.id.clone(),
                    role: a.role.clone(),
                    base_model: a.base_model.clone(),
                    plugins: a.plugins.clone(),
                })
                .collect(),
            conditions: RawConditions {
                global: self.conditions.global.iter().map(|f| (f.name.clone(), f.value.clone())).collect(),
                agents,
            },
            cost: Some(RawCost { tokens_per_message: self.cost.tokens_per_message }),
        };
        toml::to_string(&raw).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml()).map_err(|e| CardError::io(path.as_ref(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = r#"
[[agents]]
id = "a"
role = "Expert"
base_model = "m"

[[agents]]
id = "b"
role = "Searcher"
base_model = "m"
plugins = ["Wiki"]

[[agents]]
id = "c"
role = "Critic"
base_model = "m"

[conditions.global]
tool_quality = 0.7
evaluation_info = "exact match"

[conditions.agents.a]
model_quality = 0.35
input_price = 0.15
output_price = 0.6

[cost]
tokens_per_message = 256
"#;

    #[test]
    fn parses_roster_conditions_and_cost() {
        let m = Manifest::parse(THREE, "three.toml").unwrap();
        assert_eq!(m.roster.len(), 3);
        assert!(m.roster.get(1).unwrap().has_tools());
        assert_eq!(m.conditions.scalar("a", "input_price"), Some(0.15));
        assert_eq!(m.conditions.scalar("c", "tool_quality"), Some(0.7));
        assert_eq!(m.conditions.value("b", "evaluation_info"), Some(&FeatureValue::Label("exact match".into())));
        assert_eq!(m.cost.tokens_per_message, 256.0);
    }

    #[test]
    fn round_trips_through_writer() {
        let m = Manifest::parse(THREE, "three.toml").unwrap();
        let again = Manifest::parse(&m.to_toml(), "written").unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn syntax_errors_report_position() {
        let broken = "[[agents]]\nid = \"a\"\nrole = \n";
        match Manifest::parse(broken, "bad.toml") {
            Err(CardError::Parse { origin, line, .. }) => {
                assert_eq!(origin, "bad.toml");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
        let unknown = "[[agents]]\nid = \"a\"\nrole = \"r\"\nbase_model = \"m\"\ncolour = 1\n";
        assert!(matches!(Manifest::parse(unknown, "x"), Err(CardError::Parse { line: 5, .. })));
    }

    #[test]
    fn semantic_errors_are_validation_errors() {
        let dup = THREE.replacen("id = \"b\"", "id = \"a\"", 1);
        assert_eq!(Manifest::parse(&dup, "x").unwrap_err().exit_code(), 3);
        let stranger = format!("{THREE}\n[conditions.agents.z]\nmodel_quality = 1.0\n");
        assert!(matches!(Manifest::parse(&stranger, "x"), Err(CardError::UnknownAgent(id)) if id == "z"));
        let bad_cost = THREE.replace("tokens_per_message = 256", "tokens_per_message = 0");
        assert_eq!(Manifest::parse(&bad_cost, "x").unwrap_err().exit_code(), 3);
    }
}
