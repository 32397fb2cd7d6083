//! Liveness schedule and the exact activation-memory estimator.
//!
//! The estimator and the interpreter walk the same [`Liveness`] schedule:
//!
//! - a node's buffer exists from its step until after its last consumer;
//!   graph outputs are never released, unconsumed nodes are released at once;
//! - constants are resident parameters and cost nothing;
//! - a chunk region is one step of the outer schedule. Its outputs are
//!   allocated whole at region start and filled slice by slice; slices of
//!   region inputs and of region outputs are views. Other path nodes hold one
//!   slice, nodes off the chunk path hold a whole buffer per iteration, and
//!   both are released by in-span liveness. The first iteration is the largest.

use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, Op};
use crate::autochunk::ChunkPlan;
use crate::error::Result;
use crate::tensor::EXEC_ELEMENT_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Item {
    Node(NodeId),
    Region(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct RegionLive {
    pub span: Vec<NodeId>,
    pub chunk_dim: Vec<Option<usize>>,
    pub is_output: Vec<bool>,
    /// Span nodes released after each span position within an iteration.
    pub frees_after: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Liveness {
    pub items: Vec<Item>,
    /// Outer-schedule buffers released after each item.
    pub frees_after: Vec<Vec<NodeId>>,
    pub regions: Vec<RegionLive>,
}

impl Liveness {
    pub fn new(g: &Graph, plan: Option<&ChunkPlan>) -> Result<Self> {
        let n = g.len();
        let mut region_of: Vec<Option<usize>> = vec![None; n];
        if let Some(plan) = plan {
            for (r, pr) in plan.regions.iter().enumerate() {
                region_of[pr.region.start..=pr.region.end].fill(Some(r));
            }
        }
        let mut items = Vec::new();
        let mut item_of = vec![0usize; n];
        for id in 0..n {
            match region_of[id] {
                Some(r) if plan.unwrap().regions[r].region.start == id => items.push(Item::Region(r)),
                Some(_) => {}
                None => items.push(Item::Node(id)),
            }
            item_of[id] = items.len() - 1;
        }

        let consumers = g.consumers();
        let mut frees_after = vec![Vec::new(); items.len()];
        let mut regions = Vec::new();
        if let Some(plan) = plan {
            for pr in &plan.regions {
                let reg = &pr.region;
                let span: Vec<NodeId> = (reg.start..=reg.end).collect();
                let chunk_dim: Vec<Option<usize>> = span.iter().map(|id| reg.chunk_dims.get(id).copied()).collect();
                let is_output: Vec<bool> = span.iter().map(|id| reg.outputs.iter().any(|(o, _)| o == id)).collect();
                let mut fa = vec![Vec::new(); span.len()];
                for &id in &span {
                    let last_in = consumers[id].iter().copied().filter(|&c| c <= reg.end).max().unwrap_or(id);
                    fa[last_in - reg.start].push(id);
                }
                regions.push(RegionLive { span, chunk_dim, is_output, frees_after: fa });
            }
        }

        for id in 0..n {
            // Buffers internal to a region live only inside it.
            if let Some(r) = region_of[id] {
                if !regions[r].is_output[id - regions[r].span[0]] {
                    continue;
                }
            }
            if g.is_output(id) {
                continue;
            }
            let last = consumers[id].iter().map(|&c| item_of[c]).max().unwrap_or(item_of[id]);
            frees_after[last].push(id);
        }
        Ok(Liveness { items, frees_after, regions })
    }
}

/// Per-node activation footprint of one execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryProfile {
    pub element_size: u64,
    /// Live bytes while each node's output exists (first iteration for chunked nodes).
    pub footprints: Vec<u64>,
    pub peak_bytes: u64,
    pub peak_node: NodeId,
    /// Nodes excluded from footprint statistics (parameter constants).
    pub const_nodes: Vec<NodeId>,
}

impl MemoryProfile {
    /// The same profile under another element size.
    pub fn with_element_size(&self, element_size: u64) -> MemoryProfile {
        let f = |b: u64| b / self.element_size * element_size;
        MemoryProfile {
            element_size,
            footprints: self.footprints.iter().map(|&b| f(b)).collect(),
            peak_bytes: f(self.peak_bytes),
            peak_node: self.peak_node,
            const_nodes: self.const_nodes.clone(),
        }
    }

    /// Largest footprint among `ids`.
    pub fn max_over(&self, ids: impl IntoIterator<Item = NodeId>) -> u64 {
        ids.into_iter().map(|i| self.footprints[i]).max().unwrap_or(0)
    }
}

/// Exact peak-memory simulation under 8-byte execution accounting.
pub fn estimate_memory(g: &Graph, plan: Option<&ChunkPlan>) -> Result<MemoryProfile> {
    estimate_memory_with(g, plan, EXEC_ELEMENT_SIZE)
}

/// [`estimate_memory`] with an arbitrary bytes-per-element model.
///
/// A plan is validated against `g` first.
pub fn estimate_memory_with(g: &Graph, plan: Option<&ChunkPlan>, element_size: u64) -> Result<MemoryProfile> {
    if let Some(p) = plan {
        p.validate(g)?;
    }
    estimate_unchecked(g, plan, element_size)
}

/// Estimator for plans already known to be legal.
pub(crate) fn estimate_unchecked(g: &Graph, plan: Option<&ChunkPlan>, element_size: u64) -> Result<MemoryProfile> {
    let live = Liveness::new(g, plan)?;
    let elems = |id: NodeId| if matches!(g.node(id).op, Op::Const { .. }) { 0 } else { g.node(id).numel() };
    let mut footprints = vec![0u64; g.len()];
    let mut cur: u64 = 0;
    for (idx, item) in live.items.iter().enumerate() {
        match *item {
            Item::Node(id) => {
                cur += elems(id);
                footprints[id] = cur;
            }
            Item::Region(r) => {
                let reg = &live.regions[r];
                let pr = &plan.expect("regions imply a plan").regions[r];
                let (e, s) = (pr.region.extent as u64, pr.chunk_size.min(pr.region.extent) as u64);
                for (off, &id) in reg.span.iter().enumerate() {
                    if reg.is_output[off] {
                        cur += elems(id);
                    }
                }
                let mut local = vec![0u64; reg.span.len()];
                for (off, &id) in reg.span.iter().enumerate() {
                    let a = match (reg.is_output[off], reg.chunk_dim[off]) {
                        (true, _) => 0,
                        (false, Some(_)) => elems(id) / e * s,
                        (false, None) => elems(id),
                    };
                    local[off] = a;
                    cur += a;
                    footprints[id] = cur;
                    for &f in &reg.frees_after[off] {
                        cur -= local[f - reg.span[0]];
                    }
                }
            }
        }
        for &f in &live.frees_after[idx] {
            cur -= elems(f);
        }
    }
    let (peak_node, peak) =
        footprints.iter().enumerate().fold((0, 0), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    Ok(MemoryProfile {
        element_size,
        footprints: footprints.iter().map(|v| v * element_size).collect(),
        peak_bytes: peak * element_size,
        peak_node,
        const_nodes: g.nodes.iter().filter(|n| matches!(n.op, Op::Const { .. })).map(|n| n.id).collect(),
    })
}

/// Fraction of non-constant nodes whose footprint is below `threshold * peak`.
pub fn footprint_stats(profile: &MemoryProfile, threshold: f64) -> f64 {
    let counted: Vec<u64> = profile
        .footprints
        .iter()
        .enumerate()
        .filter(|(i, _)| !profile.const_nodes.contains(i))
        .map(|(_, &f)| f)
        .collect();
    if counted.is_empty() {
        return 0.0;
    }
    let cut = threshold * profile.peak_bytes as f64;
    counted.iter().filter(|&&f| (f as f64) < cut).count() as f64 / counted.len() as f64
}
