//! Versioned JSON form of graphs and memory profiles.

use serde::{Deserialize, Serialize};

use super::{Graph, MemoryProfile};
use crate::error::{Error, Result};

pub const GRAPH_SCHEMA: &str = "evoshard.graph/v1";
pub const PROFILE_SCHEMA: &str = "evoshard.memory_profile/v1";

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    schema: String,
    #[serde(flatten)]
    graph: Graph,
}

#[derive(Serialize)]
struct ProfileDoc<'a> {
    schema: &'static str,
    #[serde(flatten)]
    profile: &'a MemoryProfile,
}

impl Graph {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphDoc { schema: GRAPH_SCHEMA.into(), graph: self.clone() })?)
    }

    /// Parses and validates; dim flows are checked against recomputation.
    pub fn from_json(s: &str) -> Result<Graph> {
        let doc: GraphDoc = serde_json::from_str(s)?;
        if doc.schema != GRAPH_SCHEMA {
            return Err(Error::Parse(format!("unexpected schema {}", doc.schema)));
        }
        doc.graph.validate()?;
        Ok(doc.graph)
    }
}

impl MemoryProfile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProfileDoc { schema: PROFILE_SCHEMA, profile: self })?)
    }
}
