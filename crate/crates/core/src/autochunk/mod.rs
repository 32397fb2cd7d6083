//! Memory-budgeted chunk planning over a traced graph.
//!
//! A [`ChunkRegion`] is a contiguous span of the execution order re-run slice
//! by slice along one free dimension per node. Legality rules:
//!
//! 1. every region output carries a chunk dimension;
//! 2. chunk dimensions are closed under the dimension flow: a path node's
//!    chunk dim maps onto exactly the chunk dim of each in-span producer it
//!    flows from, and a path node is never consumed whole inside the span;
//! 3. every chunk dimension is free (no reduction or normalization over it).

mod plan;
mod search;

pub use plan::{
    execute_chunked, plan_codegen, ExecutionPlan, LoopSpec, ScatterSpec, ScheduleEntry, SliceSpec, PLAN_SCHEMA,
};
pub use search::{
    autochunk_search, find_best_chunk, find_max_chunk, find_possible_chunks, BestChunk, SearchStep, Span,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphir::{Graph, NodeId};
use crate::tensor::BF16_ELEMENT_SIZE;

/// How a span node reads one of its inputs during an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeUse {
    /// Produced inside the span in the same iteration.
    Span,
    /// A region input viewed along this dim.
    Sliced(usize),
    /// A region input read whole.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRegion {
    pub start: NodeId,
    pub end: NodeId,
    /// Common extent of every chunk dimension.
    pub extent: usize,
    /// Chunk dim of every path node.
    pub chunk_dims: BTreeMap<NodeId, usize>,
    /// Region inputs read as slices, with the sliced dim.
    pub chunk_inputs: Vec<(NodeId, usize)>,
    /// Region inputs read whole.
    pub nonchunk_inputs: Vec<NodeId>,
    pub outputs: Vec<(NodeId, usize)>,
}

fn violation(node: NodeId, reason: impl Into<String>) -> Error {
    Error::PlanValidation { node, reason: reason.into() }
}

impl ChunkRegion {
    /// Checks the legality rules for a span and chunk-dim assignment and
    /// derives the region's inputs and outputs.
    pub fn new(g: &Graph, start: NodeId, end: NodeId, chunk_dims: BTreeMap<NodeId, usize>) -> Result<ChunkRegion> {
        if start > end || end >= g.len() {
            return Err(violation(start, format!("span {start}..={end} is not inside the graph")));
        }
        for id in start..=end {
            if g.node(id).op.is_source() {
                return Err(violation(id, "input and constant nodes cannot be chunked"));
            }
        }
        let mut extent = None;
        for (&id, &d) in &chunk_dims {
            if id < start || id > end {
                return Err(violation(id, "chunk dim assigned outside the span"));
            }
            let n = g.node(id);
            if d >= n.shape.len() || !n.dim_flow.is_free(d) {
                return Err(violation(id, format!("dim {d} is not a free dimension")));
            }
            if n.dim_flow.sources(d).is_some_and(<[_]>::is_empty) {
                return Err(violation(id, format!("dim {d} does not flow from any input")));
            }
            match extent {
                None => extent = Some(n.shape[d]),
                Some(e) if e != n.shape[d] => {
                    return Err(violation(id, format!("chunk extent {} differs from {e}", n.shape[d])));
                }
                _ => {}
            }
        }
        let extent = extent.ok_or_else(|| violation(start, "region has no chunked node"))?;

        let consumers = g.consumers();
        let mut outputs = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for id in start..=end {
            let escapes = g.is_output(id) || consumers[id].iter().any(|&c| c > end);
            if escapes {
                let d = chunk_dims.get(&id).ok_or_else(|| violation(id, "region output has no chunk dim"))?;
                outputs.push((id, *d));
            }
        }
        if outputs.is_empty() {
            return Err(violation(end, "region has no outputs"));
        }

        let mut chunk_inputs = BTreeSet::new();
        let mut nonchunk_inputs = BTreeSet::new();
        for id in start..=end {
            let n = g.node(id);
            let cd = chunk_dims.get(&id).copied();
            for (k, &p) in n.inputs.iter().enumerate() {
                let flow = cd.and_then(|d| n.dim_flow.input_dim(d, k));
                if p >= start {
                    match (flow, chunk_dims.get(&p)) {
                        (Some(d), Some(&pd)) if d == pd => {}
                        (Some(d), Some(&pd)) => {
                            return Err(violation(id, format!("reads producer {p} along dim {d}, chunked along {pd}")));
                        }
                        (Some(_), None) => {
                            return Err(violation(id, format!("needs a slice of unchunked producer {p}")));
                        }
                        (None, Some(_)) => {
                            return Err(violation(id, format!("reads chunked producer {p} whole")));
                        }
                        (None, None) => {}
                    }
                } else if let Some(d) = flow {
                    chunk_inputs.insert((p, d));
                } else {
                    nonchunk_inputs.insert(p);
                }
            }
        }
        Ok(ChunkRegion {
            start,
            end,
            extent,
            chunk_dims,
            chunk_inputs: chunk_inputs.into_iter().collect(),
            nonchunk_inputs: nonchunk_inputs.into_iter().collect(),
            outputs,
        })
    }

    pub fn contains(&self, id: NodeId) -> bool {
        (self.start..=self.end).contains(&id)
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn edge_use(&self, g: &Graph, id: NodeId, k: usize) -> EdgeUse {
        let n = g.node(id);
        if n.inputs[k] >= self.start {
            return EdgeUse::Span;
        }
        match self.chunk_dims.get(&id).and_then(|&d| n.dim_flow.input_dim(d, k)) {
            Some(d) => EdgeUse::Sliced(d),
            None => EdgeUse::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedRegion {
    pub region: ChunkRegion,
    pub chunk_size: usize,
}

impl PlannedRegion {
    pub fn iterations(&self) -> usize {
        self.region.extent.div_ceil(self.chunk_size)
    }
}

/// Ordered, non-overlapping chunk regions plus the search record that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub regions: Vec<PlannedRegion>,
    #[serde(default)]
    pub log: Vec<SearchStep>,
}

impl ChunkPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a region keeping execution order; overlap is rejected.
    pub fn insert(&mut self, pr: PlannedRegion) -> Result<()> {
        if let Some(o) =
            self.regions.iter().find(|o| o.region.start <= pr.region.end && pr.region.start <= o.region.end)
        {
            return Err(violation(pr.region.start, format!("overlaps region {}..={}", o.region.start, o.region.end)));
        }
        let at = self.regions.partition_point(|o| o.region.start < pr.region.start);
        self.regions.insert(at, pr);
        Ok(())
    }

    /// A copy with one more region.
    pub fn with(&self, pr: PlannedRegion) -> Result<ChunkPlan> {
        let mut p = ChunkPlan { regions: self.regions.clone(), log: Vec::new() };
        p.insert(pr)?;
        Ok(p)
    }

    pub fn region_of(&self, id: NodeId) -> Option<usize> {
        self.regions.iter().position(|r| r.region.contains(id))
    }

    /// Re-derives every region from its span and chunk dims.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        for (i, pr) in self.regions.iter().enumerate() {
            let r = &pr.region;
            let again = ChunkRegion::new(g, r.start, r.end, r.chunk_dims.clone())?;
            if &again != r {
                return Err(violation(r.start, "region inputs/outputs do not match the graph"));
            }
            if pr.chunk_size == 0 || pr.chunk_size > r.extent {
                return Err(violation(r.start, format!("chunk size {} not in 1..={}", pr.chunk_size, r.extent)));
            }
            if i > 0 && self.regions[i - 1].region.end >= r.start {
                return Err(violation(r.start, "regions overlap or are out of order"));
            }
        }
        Ok(())
    }
}

/// Peak-memory budget under a bytes-per-element model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_peak_bytes: u64,
    pub element_size: u64,
}

impl Budget {
    /// Budget in reporting bytes (2 per element).
    pub fn new(max_peak_bytes: u64) -> Budget {
        Budget { max_peak_bytes, element_size: BF16_ELEMENT_SIZE }
    }

    pub fn with_element_size(max_peak_bytes: u64, element_size: u64) -> Budget {
        Budget { max_peak_bytes, element_size }
    }
}
