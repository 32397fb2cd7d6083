//! Executable form of a chunk plan and its interpreter entry point.

use serde::{Deserialize, Serialize};

use super::{ChunkPlan, EdgeUse, PlannedRegion, SearchStep};
use crate::error::{Error, Result};
use crate::graphir::{run, Bindings, Execution, Graph, NodeId};

pub const PLAN_SCHEMA: &str = "evoshard.execution_plan/v1";

/// A region input read as a slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub node: NodeId,
    pub input: usize,
    pub source: NodeId,
    pub dim: usize,
}

/// A region output written slice by slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScatterSpec {
    pub node: NodeId,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopSpec {
    pub region: usize,
    pub dim_extent: usize,
    pub chunk_size: usize,
    pub iterations: usize,
    pub nodes: Vec<NodeId>,
    pub slice_specs: Vec<SliceSpec>,
    pub scatter_specs: Vec<ScatterSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleEntry {
    Node(NodeId),
    Loop {
        #[serde(rename = "loop")]
        spec: LoopSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub schema: String,
    pub graph_nodes: usize,
    pub schedule: Vec<ScheduleEntry>,
    pub regions: Vec<PlannedRegion>,
    #[serde(default)]
    pub search_log: Vec<SearchStep>,
}

/// Lowers a validated chunk plan to a flat schedule with explicit loops.
pub fn plan_codegen(g: &Graph, plan: &ChunkPlan) -> Result<ExecutionPlan> {
    plan.validate(g)?;
    let mut schedule = Vec::new();
    let mut id = 0;
    while id < g.len() {
        let Some(r) = plan.region_of(id) else {
            schedule.push(ScheduleEntry::Node(id));
            id += 1;
            continue;
        };
        let pr = &plan.regions[r];
        let reg = &pr.region;
        let mut slice_specs = Vec::new();
        for n in reg.start..=reg.end {
            for (k, &p) in g.node(n).inputs.iter().enumerate() {
                if let EdgeUse::Sliced(dim) = reg.edge_use(g, n, k) {
                    slice_specs.push(SliceSpec { node: n, input: k, source: p, dim });
                }
            }
        }
        schedule.push(ScheduleEntry::Loop {
            spec: LoopSpec {
                region: r,
                dim_extent: reg.extent,
                chunk_size: pr.chunk_size,
                iterations: pr.iterations(),
                nodes: (reg.start..=reg.end).collect(),
                slice_specs,
                scatter_specs: reg.outputs.iter().map(|&(node, dim)| ScatterSpec { node, dim }).collect(),
            },
        });
        id = reg.end + 1;
    }
    Ok(ExecutionPlan {
        schema: PLAN_SCHEMA.into(),
        graph_nodes: g.len(),
        schedule,
        regions: plan.regions.clone(),
        search_log: plan.log.clone(),
    })
}

impl ExecutionPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses without reference to a graph; see [`ExecutionPlan::to_chunk_plan`].
    pub fn from_json(s: &str) -> Result<ExecutionPlan> {
        let p: ExecutionPlan = serde_json::from_str(s)?;
        if p.schema != PLAN_SCHEMA {
            return Err(Error::Parse(format!("unexpected schema {}", p.schema)));
        }
        Ok(p)
    }

    /// The chunk plan, checked against `g` including its lowered schedule.
    pub fn to_chunk_plan(&self, g: &Graph) -> Result<ChunkPlan> {
        if self.graph_nodes != g.len() {
            return Err(Error::PlanValidation {
                node: self.graph_nodes.min(g.len()),
                reason: format!("plan is for {} nodes, graph has {}", self.graph_nodes, g.len()),
            });
        }
        let plan = ChunkPlan { regions: self.regions.clone(), log: self.search_log.clone() };
        let lowered = plan_codegen(g, &plan)?;
        if lowered.schedule != self.schedule {
            return Err(Error::PlanValidation { node: 0, reason: "schedule does not match the regions".into() });
        }
        Ok(plan)
    }
}

/// Runs `g` under `plan`; the plan is validated first.
pub fn execute_chunked(g: &Graph, plan: &ChunkPlan, b: &Bindings) -> Result<Execution> {
    plan.validate(g)?;
    run(g, Some(plan), b)
}
