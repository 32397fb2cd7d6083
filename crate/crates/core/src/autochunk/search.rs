//! Greedy peak-driven chunk search.
//!
//! Each round takes the largest footprint outside existing regions, bounds a
//! span by the buffers live there, enumerates legal regions covering the
//! peak, sizes each one, and keeps the best. The round repeats until the
//! estimated peak fits the budget or no candidate reduces it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Budget, ChunkPlan, ChunkRegion, PlannedRegion};
use crate::error::{Error, Result};
use crate::graphir::{estimate_unchecked, Graph, MemoryProfile, NodeId, Op};

/// Nodes a region around `peak` may cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub peak: NodeId,
    pub start: NodeId,
    pub end: NodeId,
}

/// A sized candidate region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BestChunk {
    pub region: ChunkRegion,
    pub chunk_size: usize,
    /// Largest footprint over the region's nodes once chunked.
    pub local_peak: u64,
    /// Loop iterations.
    pub cost: usize,
    pub meets_budget: bool,
}

/// One round of the search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStep {
    pub peak_bytes: u64,
    pub peak_node: NodeId,
    pub span: Option<Span>,
    pub candidates: usize,
    pub chosen: Option<(NodeId, NodeId, usize)>,
    pub local_peak: Option<u64>,
}

fn blocked(g: &Graph, plan: &ChunkPlan, id: NodeId) -> bool {
    g.node(id).op.is_source() || plan.region_of(id).is_some()
}

/// The span around the largest over-budget footprint outside existing regions.
///
/// Returns `None` when every such footprint fits or the peak sits on a graph
/// input or constant.
pub fn find_max_chunk(g: &Graph, plan: &ChunkPlan, profile: &MemoryProfile, budget: &Budget) -> Option<Span> {
    let peak =
        (0..g.len()).filter(|&i| plan.region_of(i).is_none()).fold(None, |best: Option<NodeId>, i| match best {
            Some(b) if profile.footprints[b] >= profile.footprints[i] => Some(b),
            _ => Some(i),
        })?;
    if profile.footprints[peak] <= budget.max_peak_bytes || g.node(peak).op.is_source() {
        return None;
    }
    let consumers = g.consumers();
    let (mut lo, mut hi) = (peak, peak);
    // Node ids index `consumers`, and `p` is compared against them.
    #[allow(clippy::needless_range_loop)]
    for p in 0..=peak {
        if g.node(p).op.is_source() {
            continue;
        }
        if let Some(r) = plan.region_of(p) {
            if !plan.regions[r].region.outputs.iter().any(|&(o, _)| o == p) {
                continue;
            }
        }
        let last = consumers[p].iter().copied().max().unwrap_or(p);
        if p == peak || last >= peak || g.is_output(p) {
            lo = lo.min(p);
            hi = hi.max(last);
        }
    }
    let mut start = peak;
    while start > lo && !blocked(g, plan, start - 1) {
        start -= 1;
    }
    let mut end = peak;
    while end < hi && !blocked(g, plan, end + 1) {
        end += 1;
    }
    Some(Span { peak, start, end })
}

/// Assigns chunk dims by tracing `seed` up through in-span producers.
fn trace(g: &Graph, start: NodeId, extent: usize, seed: (NodeId, usize), dims: &mut BTreeMap<NodeId, usize>) -> bool {
    let mut stack = vec![seed];
    while let Some((n, d)) = stack.pop() {
        if let Some(&have) = dims.get(&n) {
            if have != d {
                return false;
            }
            continue;
        }
        let node = g.node(n);
        match node.dim_flow.sources(d) {
            Some(src) if !src.is_empty() && node.shape[d] == extent => {
                dims.insert(n, d);
                for &(k, dk) in src {
                    let p = node.inputs[k];
                    if p >= start {
                        stack.push((p, dk));
                    }
                }
            }
            _ => return false,
        }
    }
    true
}

fn free_dims(g: &Graph, id: NodeId) -> Vec<usize> {
    let n = g.node(id);
    (0..n.shape.len()).filter(|&d| n.shape[d] > 1 && n.dim_flow.sources(d).is_some_and(|s| !s.is_empty())).collect()
}

/// Legal regions for `start..=end`, one per chunk dim of the last node.
fn regions_for(g: &Graph, consumers: &[Vec<NodeId>], start: NodeId, end: NodeId) -> Vec<ChunkRegion> {
    let escapes: Vec<NodeId> =
        (start..=end).rev().filter(|&id| g.is_output(id) || consumers[id].iter().any(|&c| c > end)).collect();
    if escapes.first() != Some(&end) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for d0 in free_dims(g, end) {
        let extent = g.node(end).shape[d0];
        let mut dims = BTreeMap::new();
        if !trace(g, start, extent, (end, d0), &mut dims) {
            continue;
        }
        let mut ok = true;
        for &o in &escapes[1..] {
            if dims.contains_key(&o) {
                continue;
            }
            let found = free_dims(g, o).into_iter().find_map(|d| {
                let mut trial = dims.clone();
                trace(g, start, extent, (o, d), &mut trial).then_some(trial)
            });
            match found {
                Some(t) => dims = t,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            if let Ok(r) = ChunkRegion::new(g, start, end, dims) {
                out.push(r);
            }
        }
    }
    out
}

/// Every legal region inside `span` that covers its peak node.
pub fn find_possible_chunks(g: &Graph, span: &Span) -> Vec<ChunkRegion> {
    let consumers = g.consumers();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let starts: Vec<NodeId> = (span.start..=span.peak).filter(|&s| !free_dims(g, s).is_empty()).collect();
    for end in span.peak..=span.end {
        if free_dims(g, end).is_empty() {
            continue;
        }
        for &start in &starts {
            for r in regions_for(g, &consumers, start, end) {
                if seen.insert((r.start, r.end, r.chunk_dims.clone())) {
                    out.push(r);
                }
            }
        }
    }
    out
}

fn local_peak(g: &Graph, plan: &ChunkPlan, region: &ChunkRegion, chunk_size: usize, es: u64) -> Result<u64> {
    let trial = plan.with(PlannedRegion { region: region.clone(), chunk_size })?;
    let prof = estimate_unchecked(g, Some(&trial), es)?;
    Ok(prof.max_over(region.start..=region.end))
}

/// Largest chunk size meeting the budget, else the largest size reaching the
/// lowest footprint among the halving sizes.
///
/// Sizes are tried by halving from the full extent. The chunked footprint is
/// a maximum of affine functions of the size, so it is non-decreasing and the
/// gap between the last failing and first meeting size is bisected.
fn size_region(g: &Graph, plan: &ChunkPlan, region: &ChunkRegion, budget: &Budget) -> Result<(usize, u64, bool)> {
    let e = region.extent;
    let fits = |b: u64| b <= budget.max_peak_bytes;
    let mut fail: Option<usize> = None;
    let mut tried: Vec<(usize, u64)> = Vec::new();
    let mut s = e;
    loop {
        let lp = local_peak(g, plan, region, s, budget.element_size)?;
        tried.push((s, lp));
        if fits(lp) {
            let (mut meet, mut meet_lp) = (s, lp);
            if let Some(mut f) = fail {
                while f - meet > 1 {
                    let mid = (f + meet) / 2;
                    let lp = local_peak(g, plan, region, mid, budget.element_size)?;
                    if fits(lp) {
                        (meet, meet_lp) = (mid, lp);
                    } else {
                        f = mid;
                    }
                }
            }
            return Ok((meet, meet_lp, true));
        }
        if s == 1 {
            break;
        }
        fail = Some(s);
        s = s.div_ceil(2);
    }
    let min = tried.iter().map(|t| t.1).min().expect("at least one size tried");
    let (s, lp) = *tried.iter().find(|t| t.1 == min).expect("minimum exists");
    Ok((s, lp, false))
}

/// Sizes every candidate and picks the best by: meets the budget, fewest
/// iterations, largest reduction, earliest start, shortest span.
///
/// Candidates that do not bring their footprint strictly under
/// `current_peak` are dropped.
pub fn find_best_chunk(
    g: &Graph,
    plan: &ChunkPlan,
    candidates: &[ChunkRegion],
    budget: &Budget,
    current_peak: u64,
) -> Result<Option<BestChunk>> {
    let mut best: Option<BestChunk> = None;
    for r in candidates {
        let (chunk_size, lp, meets) = size_region(g, plan, r, budget)?;
        if lp >= current_peak {
            continue;
        }
        let c = BestChunk {
            region: r.clone(),
            chunk_size,
            local_peak: lp,
            cost: r.extent.div_ceil(chunk_size),
            meets_budget: meets,
        };
        let key = |b: &BestChunk| (!b.meets_budget, b.cost, b.local_peak, b.region.start, b.region.len());
        if best.as_ref().is_none_or(|b| key(&c) < key(b)) {
            best = Some(c);
        }
    }
    Ok(best)
}

/// Drops leading and trailing permutes from the chosen region while it stays
/// legal and its footprint does not grow.
fn trim_permutes(g: &Graph, plan: &ChunkPlan, mut best: BestChunk, peak: NodeId, es: u64) -> Result<BestChunk> {
    loop {
        let r = &best.region;
        let mut next = None;
        for (s, e) in [(r.start + 1, r.end), (r.start, r.end.saturating_sub(1))] {
            let edge = if s != r.start { r.start } else { r.end };
            if !matches!(g.node(edge).op, Op::Permute { .. }) || s > peak || e < peak || s > e {
                continue;
            }
            let mut dims = r.chunk_dims.clone();
            dims.remove(&edge);
            let Ok(cand) = ChunkRegion::new(g, s, e, dims) else { continue };
            let lp = local_peak(g, plan, &cand, best.chunk_size, es)?;
            if lp <= best.local_peak {
                next = Some(BestChunk { region: cand, local_peak: lp, ..best.clone() });
                break;
            }
        }
        match next {
            Some(n) => best = n,
            None => return Ok(best),
        }
    }
}

/// Chunk plan whose estimated peak fits `budget`.
///
/// Fails with [`Error::Infeasible`] carrying the lowest peak reached when the
/// greedy search stalls above the budget.
pub fn autochunk_search(g: &Graph, budget: &Budget) -> Result<ChunkPlan> {
    let mut plan = ChunkPlan::new();
    let mut log = Vec::new();
    loop {
        let profile = estimate_unchecked(g, Some(&plan), budget.element_size)?;
        if profile.peak_bytes <= budget.max_peak_bytes {
            plan.log = log;
            return Ok(plan);
        }
        let mut step = SearchStep {
            peak_bytes: profile.peak_bytes,
            peak_node: profile.peak_node,
            span: None,
            candidates: 0,
            chosen: None,
            local_peak: None,
        };
        let chosen = match find_max_chunk(g, &plan, &profile, budget) {
            Some(span) => {
                step.span = Some(span);
                let cands = find_possible_chunks(g, &span);
                step.candidates = cands.len();
                match find_best_chunk(g, &plan, &cands, budget, profile.footprints[span.peak])? {
                    Some(b) => Some(trim_permutes(g, &plan, b, span.peak, budget.element_size)?),
                    None => None,
                }
            }
            None => None,
        };
        let Some(best) = chosen else {
            return Err(Error::Infeasible { budget: budget.max_peak_bytes, min_peak: profile.peak_bytes });
        };
        step.chosen = Some((best.region.start, best.region.end, best.chunk_size));
        step.local_peak = Some(best.local_peak);
        log.push(step);
        plan.insert(PlannedRegion { region: best.region, chunk_size: best.chunk_size })?;
    }
}
