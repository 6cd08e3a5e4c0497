//! Condition-aware communication-graph generation for multi-agent systems.

pub mod agent;
pub mod analysis;
pub mod embedding;
pub mod error;
pub mod generator;
pub mod graph;
pub mod linalg;
pub mod manifest;
pub mod runtime;
pub mod sim;
pub mod training;

pub use agent::{AgentProfile, ConditionFeature, ConditionSet, FeatureValue, Query, Roster};
pub use embedding::{embed, Embedder, EmbedderKind, EmbedderSpec, Embedding};
pub use error::{CardError, Result};
pub use generator::{generate, GeneratorDims, GeneratorParams};
pub use graph::{AnchorKind, AnchorTopology, CommTopology, Edge, EdgeProbabilityMatrix};
pub use runtime::{run_rounds, AgentExecutor, Aggregation, Transcript};
pub use training::{train, CostModel, Environment, TrainConfig};
