//! Graph interpreter with allocator measurement.

use std::collections::BTreeMap;

use super::memory::{Item, Liveness};
use super::{EwKind, Graph, NodeId, Op, Operand};
use crate::autochunk::{ChunkPlan, EdgeUse};
use crate::error::{Error, Result};
use crate::evoformer::BlockParams;
use crate::tensor::{self, broadcast_strides, for_each_broadcast, untracked, AllocStats, Tensor, Tracker};

/// Values for input and constant nodes, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    values: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(p: &BlockParams) -> Self {
        let mut b = Self::new();
        for (k, v) in p.iter() {
            b.insert(k, v.clone());
        }
        b
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.values.insert(name.to_string(), value);
    }

    pub fn with(mut self, name: &str, value: Tensor) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values.get(name).ok_or_else(|| Error::Graph(format!("no value bound to {name}")))
    }
}

/// Outputs of a run with the allocator statistics it produced.
#[derive(Debug, Clone)]
pub struct Execution {
    pub outputs: Vec<Tensor>,
    /// Measured 8-byte accounting.
    pub stats: AllocStats,
    /// Measured live bytes while each node's output exists, before its dead
    /// inputs are released. Chunked nodes report their first iteration.
    pub footprints: Vec<u64>,
}

fn fused_elementwise(program: &[super::Instr], ins: &[&Tensor], out: &[usize]) -> Result<Tensor> {
    let strides: Vec<Vec<usize>> = ins.iter().map(|t| broadcast_strides(t.shape(), out)).collect();
    let datas: Vec<&[f64]> = ins.iter().map(|t| t.data()).collect();
    let mut tmp = vec![0.0; program.len()];
    let mut data = vec![0.0; tensor::numel(out)];
    for_each_broadcast(out, &strides, |i, offs| {
        for (j, instr) in program.iter().enumerate() {
            let arg = |a: Operand| match a {
                Operand::Input(k) => datas[k][offs[k]],
                Operand::Tmp(t) => tmp[t],
            };
            tmp[j] = match instr.kind {
                EwKind::Add => arg(instr.args[0]) + arg(instr.args[1]),
                EwKind::Mul => arg(instr.args[0]) * arg(instr.args[1]),
                EwKind::Sigmoid => tensor::sigmoid_scalar(arg(instr.args[0])),
                EwKind::Relu => arg(instr.args[0]).max(0.0),
                EwKind::Scale { factor } => arg(instr.args[0]) * factor,
            };
        }
        data[i] = tmp[program.len() - 1];
    });
    Tensor::from_vec(out, data)
}

/// Evaluates one non-source op. `out` is the expected output shape, which
/// differs from the node's declared shape on chunk slices.
pub(crate) fn exec_op(op: &Op, ins: &[&Tensor], out: &[usize]) -> Result<Tensor> {
    let r = match op {
        Op::Input { .. } | Op::Const { .. } => return Err(Error::Graph("source ops are bound, not executed".into())),
        Op::Matmul => tensor::matmul(ins[0], ins[1])?,
        Op::Linear => tensor::linear(ins[0], ins[1], ins.get(2).copied())?,
        Op::LayerNorm { eps } => tensor::layernorm(ins[0], ins[1], ins[2], *eps)?,
        Op::Softmax { axis } => tensor::softmax(ins[0], *axis)?,
        Op::FusedSoftmax { axis, mask, .. } => {
            let (m, b) = match (ins.len(), mask) {
                (1, _) => (None, None),
                (2, true) => (Some(ins[1]), None),
                (2, false) => (None, Some(ins[1])),
                _ => (Some(ins[1]), Some(ins[2])),
            };
            tensor::fused_softmax_mask_bias(ins[0], m, b, *axis)?
        }
        Op::Sigmoid => tensor::sigmoid(ins[0]),
        Op::Relu => tensor::relu(ins[0]),
        Op::Scale { factor } => tensor::scale(ins[0], *factor),
        Op::Add => tensor::add(ins[0], ins[1])?,
        Op::Mul => tensor::mul(ins[0], ins[1])?,
        Op::Mean { axis } => tensor::mean_axis(ins[0], *axis)?,
        Op::Sum { axis } => tensor::sum_axis(ins[0], *axis)?,
        Op::Permute { perm } => tensor::permute(ins[0], perm)?,
        Op::Reshape { .. } => tensor::reshape(ins[0], out)?,
        Op::Concat => tensor::concat_last(ins)?,
        Op::Slice { axis, start, end } => tensor::slice_axis(ins[0], *axis, *start, *end)?,
        Op::Outer => tensor::outer(ins[0], ins[1])?,
        Op::OuterMean => tensor::outer_mean(ins[0], ins[1])?,
        Op::ContractK => tensor::contract_k(ins[0], ins[1])?,
        Op::FusedElementwise { program } => fused_elementwise(program, ins, out)?,
    };
    if r.shape() != out {
        return Err(Error::Graph(format!("{} produced {:?}, expected {out:?}", op.kind(), r.shape())));
    }
    Ok(r)
}

fn const_value(names: &[String], b: &Bindings, shape: &[usize]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = names.iter().map(|n| b.get(n)).collect::<Result<_>>()?;
    let t = if parts.len() == 1 { parts[0].clone() } else { untracked(|| tensor::concat_last(&parts))? };
    if t.shape() != shape {
        return Err(Error::Graph(format!("constant {names:?} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

/// Runs `g` unchunked under a fresh allocation tracker.
pub fn execute(g: &Graph, b: &Bindings) -> Result<Execution> {
    run(g, None, b)
}

/// Shared interpreter; `plan` must already be validated against `g`.
pub(crate) fn run(g: &Graph, plan: Option<&ChunkPlan>, b: &Bindings) -> Result<Execution> {
    let live = Liveness::new(g, plan)?;
    let tracker = Tracker::new();
    let guard = tracker.enter();
    let mut values: Vec<Option<Tensor>> = vec![None; g.len()];
    let mut footprints = vec![0u64; g.len()];
    let fetch = |values: &[Option<Tensor>], i: NodeId| -> Result<Tensor> {
        values[i].clone().ok_or_else(|| Error::Graph(format!("value of node {i} is not live")))
    };

    for (idx, item) in live.items.iter().enumerate() {
        match *item {
            Item::Node(id) => {
                let n = g.node(id);
                let v = match &n.op {
                    Op::Input { name } => {
                        let t = b.get(name)?;
                        if t.shape() != n.shape.as_slice() {
                            return Err(Error::Graph(format!(
                                "input {name} has shape {:?}, expected {:?}",
                                t.shape(),
                                n.shape
                            )));
                        }
                        t.deep_clone()
                    }
                    Op::Const { names } => const_value(names, b, &n.shape)?,
                    op => {
                        let ins: Vec<Tensor> = n.inputs.iter().map(|&i| fetch(&values, i)).collect::<Result<_>>()?;
                        let refs: Vec<&Tensor> = ins.iter().collect();
                        exec_op(op, &refs, &n.shape)?
                    }
                };
                values[id] = Some(v);
                footprints[id] = tracker.stats().live_bytes;
            }
            Item::Region(r) => {
                let reg = &live.regions[r];
                let region = &plan.expect("regions imply a plan").regions[r];
                let (e, s) = (region.region.extent, region.chunk_size);
                let mut full: BTreeMap<NodeId, Tensor> = BTreeMap::new();
                for &(o, _) in &region.region.outputs {
                    full.insert(o, Tensor::zeros(&g.node(o).shape));
                }
                let mut first = true;
                let mut lo = 0;
                while lo < e {
                    let hi = (lo + s).min(e);
                    let mut local: BTreeMap<NodeId, Tensor> = BTreeMap::new();
                    for (off, &id) in reg.span.iter().enumerate() {
                        let n = g.node(id);
                        let cd = reg.chunk_dim[off];
                        let mut ins = Vec::with_capacity(n.inputs.len());
                        for (k, &p) in n.inputs.iter().enumerate() {
                            let t = match region.region.edge_use(g, id, k) {
                                EdgeUse::Span => local
                                    .get(&p)
                                    .cloned()
                                    .ok_or_else(|| Error::Graph(format!("span value {p} is not live")))?,
                                EdgeUse::Full => fetch(&values, p)?,
                                EdgeUse::Sliced(d) => {
                                    let full_in = fetch(&values, p)?;
                                    untracked(|| tensor::slice_axis(&full_in, d, lo, hi))?
                                }
                            };
                            ins.push(t);
                        }
                        let refs: Vec<&Tensor> = ins.iter().collect();
                        let mut shape = n.shape.clone();
                        if let Some(d) = cd {
                            shape[d] = hi - lo;
                        }
                        let v = if let Some(dst) = full.get_mut(&id) {
                            // Computed straight into the preallocated output.
                            let v = untracked(|| exec_op(&n.op, &refs, &shape))?;
                            tensor::write_slice(dst, cd.expect("outputs are chunked"), lo, &v)?;
                            v
                        } else {
                            exec_op(&n.op, &refs, &shape)?
                        };
                        drop(ins);
                        local.insert(id, v);
                        if first {
                            footprints[id] = tracker.stats().live_bytes;
                        }
                        for f in &reg.frees_after[off] {
                            local.remove(f);
                        }
                    }
                    debug_assert!(local.is_empty());
                    first = false;
                    lo = hi;
                }
                for (o, t) in full {
                    values[o] = Some(t);
                }
            }
        }
        for &f in &live.frees_after[idx] {
            values[f] = None;
        }
    }

    let outputs = g.outputs.iter().map(|&o| fetch(&values, o)).collect::<Result<Vec<_>>>()?;
    drop(values);
    let stats = tracker.stats();
    drop(guard);
    Ok(Execution { outputs, stats, footprints })
}
