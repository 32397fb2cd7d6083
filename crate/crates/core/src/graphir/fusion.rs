//! Graph rewrites: merged projections and fused elementwise chains.
//!
//! Each candidate rewrite is applied on its own and kept only when the
//! estimated peak does not grow.

use std::collections::{BTreeMap, BTreeSet};

use super::memory::estimate_unchecked;
use super::{EwKind, Graph, GraphBuilder, Instr, Node, NodeId, Op, Operand};
use crate::error::Result;
use crate::tensor::EXEC_ELEMENT_SIZE;

type Hook<'a> = dyn FnMut(&mut GraphBuilder, &Node, &[NodeId]) -> Result<Option<NodeId>> + 'a;

/// Copies `g` node by node. `hook` may emit replacement nodes for an old
/// node and return the id standing in for it; returning `None` copies it.
/// `skip` nodes are dropped (they must be unreferenced afterwards).
fn rebuild(g: &Graph, skip: &BTreeSet<NodeId>, hook: &mut Hook<'_>) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let mut map: Vec<NodeId> = vec![usize::MAX; g.len()];
    for n in &g.nodes {
        if skip.contains(&n.id) {
            continue;
        }
        if let Some(id) = hook(&mut b, n, &map)? {
            map[n.id] = id;
            continue;
        }
        map[n.id] = match &n.op {
            Op::Input { name } => b.input(name, &n.shape),
            Op::Const { names } => b.constant_parts(names.clone(), &n.shape),
            op => b.op(op.clone(), &n.inputs.iter().map(|&i| map[i]).collect::<Vec<_>>())?,
        };
    }
    let outs: Vec<NodeId> = g.outputs.iter().map(|&o| map[o]).collect();
    prune_dead_consts(b.build(&outs)?)
}

fn prune_dead_consts(g: Graph) -> Result<Graph> {
    let consumers = g.consumers();
    let dead: BTreeSet<NodeId> = g
        .nodes
        .iter()
        .filter(|n| matches!(n.op, Op::Const { .. }) && consumers[n.id].is_empty() && !g.is_output(n.id))
        .map(|n| n.id)
        .collect();
    if dead.is_empty() {
        return Ok(g);
    }
    rebuild(&g, &dead, &mut |_, _, _| Ok(None))
}

fn peak(g: &Graph) -> Result<u64> {
    Ok(estimate_unchecked(g, None, EXEC_ELEMENT_SIZE)?.peak_bytes)
}

fn single_const(g: &Graph, id: NodeId) -> Option<&str> {
    match &g.node(id).op {
        Op::Const { names } if names.len() == 1 => Some(&names[0]),
        _ => None,
    }
}

/// Linear nodes sharing an input (and bias presence), grouped in order.
fn gemm_groups(g: &Graph) -> Vec<Vec<NodeId>> {
    let mut groups: BTreeMap<(NodeId, bool), Vec<NodeId>> = BTreeMap::new();
    for n in &g.nodes {
        if n.op != Op::Linear || n.inputs[1..].iter().any(|&c| single_const(g, c).is_none()) {
            continue;
        }
        groups.entry((n.inputs[0], n.inputs.len() == 3)).or_default().push(n.id);
    }
    let mut v: Vec<Vec<NodeId>> = groups.into_values().filter(|m| m.len() >= 2).collect();
    v.sort_by_key(|m| m[0]);
    v
}

fn merge_group(g: &Graph, members: &[NodeId]) -> Result<Graph> {
    let has_bias = g.node(members[0]).inputs.len() == 3;
    let widths: Vec<usize> = members.iter().map(|&m| *g.node(m).shape.last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let cin = g.node(g.node(members[0]).inputs[1]).shape[0];
    let names = |k: usize| -> Vec<String> {
        members.iter().map(|&m| single_const(g, g.node(m).inputs[k]).unwrap().to_string()).collect()
    };
    let (w_names, b_names) = (names(1), if has_bias { names(2) } else { vec![] });
    let mut merged: Option<NodeId> = None;
    let mut hook = |b: &mut GraphBuilder, n: &Node, map: &[NodeId]| -> Result<Option<NodeId>> {
        let Some(k) = members.iter().position(|&m| m == n.id) else { return Ok(None) };
        let lin = match merged {
            Some(id) => id,
            None => {
                let w = b.constant_parts(w_names.clone(), &[cin, total]);
                let mut ins = vec![map[n.inputs[0]], w];
                if has_bias {
                    ins.push(b.constant_parts(b_names.clone(), &[total]));
                }
                let id = b.op(Op::Linear, &ins)?;
                merged = Some(id);
                id
            }
        };
        let start: usize = widths[..k].iter().sum();
        let axis = n.shape.len() - 1;
        Ok(Some(b.op(Op::Slice { axis, start, end: start + widths[k] }, &[lin])?))
    };
    rebuild(g, &BTreeSet::new(), &mut hook)
}

/// Replaces linear layers that read the same tensor with one linear over
/// concatenated weights followed by slices.
pub fn fuse_merge_gemm(g: &Graph) -> Result<Graph> {
    let mut cur = g.clone();
    let mut best = peak(&cur)?;
    loop {
        let mut changed = false;
        for members in gemm_groups(&cur) {
            let cand = merge_group(&cur, &members)?;
            let p = peak(&cand)?;
            if p <= best {
                cur = cand;
                best = p;
                changed = true;
                break;
            }
        }
        if !changed {
            return Ok(cur);
        }
    }
}

/// The single consumer of `id`, if it has exactly one and is not a graph output.
fn sole_consumer(g: &Graph, consumers: &[Vec<NodeId>], id: NodeId) -> Option<NodeId> {
    match consumers[id].as_slice() {
        [c] if !g.is_output(id) => Some(*c),
        _ => None,
    }
}

/// `softmax(add(x, bias))` pairs where the add feeds only the softmax.
fn softmax_sites(g: &Graph) -> Vec<(NodeId, NodeId)> {
    let consumers = g.consumers();
    g.nodes
        .iter()
        .filter_map(|n| {
            let Op::Softmax { .. } = n.op else { return None };
            let a = n.inputs[0];
            let add = g.node(a);
            (add.op == Op::Add
                && sole_consumer(g, &consumers, a) == Some(n.id)
                && add.inputs.iter().any(|&i| g.node(i).shape == add.shape))
            .then_some((a, n.id))
        })
        .collect()
}

fn fuse_softmax_site(g: &Graph, add: NodeId, sm: NodeId) -> Result<Graph> {
    let a = g.node(add);
    let (x, bias) =
        if g.node(a.inputs[0]).shape == a.shape { (a.inputs[0], a.inputs[1]) } else { (a.inputs[1], a.inputs[0]) };
    let skip = BTreeSet::from([add]);
    rebuild(g, &skip, &mut |b, n, map| {
        if n.id != sm {
            return Ok(None);
        }
        let Op::Softmax { axis } = n.op else { unreachable!() };
        Ok(Some(b.op(Op::FusedSoftmax { axis, mask: false, bias: true }, &[map[x], map[bias]])?))
    })
}

/// Elementwise trees: every non-root member feeds only the next member.
fn elementwise_groups(g: &Graph) -> Vec<Vec<NodeId>> {
    let consumers = g.consumers();
    let mut root: Vec<NodeId> = (0..g.len()).collect();
    for n in g.nodes.iter().rev() {
        if !n.op.is_elementwise() {
            continue;
        }
        if let Some(c) = sole_consumer(g, &consumers, n.id) {
            if g.node(c).op.is_elementwise() {
                root[n.id] = root[c];
            }
        }
    }
    let mut groups: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for n in &g.nodes {
        if n.op.is_elementwise() {
            groups.entry(root[n.id]).or_default().push(n.id);
        }
    }
    groups.into_values().filter(|m| m.len() >= 2).collect()
}

fn instrs_of(op: &Op) -> Vec<Instr> {
    let one = |kind: EwKind, n: usize| vec![Instr { kind, args: (0..n).map(Operand::Input).collect() }];
    match op {
        Op::Add => one(EwKind::Add, 2),
        Op::Mul => one(EwKind::Mul, 2),
        Op::Sigmoid => one(EwKind::Sigmoid, 1),
        Op::Relu => one(EwKind::Relu, 1),
        Op::Scale { factor } => one(EwKind::Scale { factor: *factor }, 1),
        Op::FusedElementwise { program } => program.clone(),
        _ => unreachable!("not elementwise"),
    }
}

/// One fused program for `members` (ascending, last is the root).
fn fused_program(g: &Graph, members: &[NodeId]) -> (Vec<NodeId>, Vec<Instr>) {
    let mut ext: Vec<NodeId> = Vec::new();
    let mut result_of: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut program: Vec<Instr> = Vec::new();
    for &m in members {
        let n = g.node(m);
        let base = program.len();
        let ops: Vec<Operand> = n
            .inputs
            .iter()
            .map(|&i| match result_of.get(&i) {
                Some(&t) => Operand::Tmp(t),
                None => {
                    let k = ext.iter().position(|&e| e == i).unwrap_or_else(|| {
                        ext.push(i);
                        ext.len() - 1
                    });
                    Operand::Input(k)
                }
            })
            .collect();
        for ins in instrs_of(&n.op) {
            let args = ins
                .args
                .iter()
                .map(|a| match *a {
                    Operand::Input(k) => ops[k],
                    Operand::Tmp(t) => Operand::Tmp(base + t),
                })
                .collect();
            program.push(Instr { kind: ins.kind, args });
        }
        result_of.insert(m, program.len() - 1);
    }
    (ext, program)
}

fn fuse_group(g: &Graph, members: &[NodeId]) -> Result<Graph> {
    let root = *members.last().unwrap();
    let (ext, program) = fused_program(g, members);
    let skip: BTreeSet<NodeId> = members[..members.len() - 1].iter().copied().collect();
    let mut program = Some(program);
    rebuild(g, &skip, &mut |b, n, map| {
        if n.id != root {
            return Ok(None);
        }
        let ins: Vec<NodeId> = ext.iter().map(|&e| map[e]).collect();
        Ok(Some(b.op(Op::FusedElementwise { program: program.take().unwrap() }, &ins)?))
    })
}

/// Folds `add -> softmax` into a fused softmax and collapses elementwise
/// trees into single fused nodes.
pub fn fuse_elementwise(g: &Graph) -> Result<Graph> {
    let mut cur = g.clone();
    let mut best = peak(&cur)?;
    let mut rejected: BTreeSet<Vec<NodeId>> = BTreeSet::new();
    // Node ids shift after each accepted rewrite, so sites are recomputed.
    loop {
        let mut changed = false;
        let softmax: Vec<Vec<NodeId>> = softmax_sites(&cur).into_iter().map(|(a, s)| vec![a, s]).collect();
        for site in softmax {
            if rejected.contains(&site) {
                continue;
            }
            let cand = fuse_softmax_site(&cur, site[0], site[1])?;
            let p = peak(&cand)?;
            if p <= best {
                (cur, best, changed) = (cand, p, true);
                rejected.clear();
                break;
            }
            rejected.insert(site);
        }
        if changed {
            continue;
        }
        for members in elementwise_groups(&cur) {
            if rejected.contains(&members) {
                continue;
            }
            let cand = fuse_group(&cur, &members)?;
            let p = peak(&cand)?;
            if p <= best {
                (cur, best, changed) = (cand, p, true);
                rejected.clear();
                break;
            }
            rejected.insert(members);
        }
        if !changed {
            return Ok(cur);
        }
    }
}
