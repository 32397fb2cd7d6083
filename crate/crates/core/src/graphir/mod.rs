//! Fine-grained computation graph of the evoformer forward pass.
//!
//! Every engine primitive is one node. Node ids equal positions in the
//! (topological) execution order. Each node carries a [`DimFlow`] relating
//! its output dimensions to input dimensions, which is what chunk legality
//! is decided on.

mod exec;
mod fusion;
mod io;
mod memory;
pub mod random;
mod trace;

pub use exec::{execute, Bindings, Execution};
pub use fusion::{fuse_elementwise, fuse_merge_gemm};
pub use io::GRAPH_SCHEMA;
pub use memory::{estimate_memory, estimate_memory_with, footprint_stats, MemoryProfile};
pub use trace::{trace_evoformer, Tracer};

pub(crate) use exec::run;
pub(crate) use memory::estimate_unchecked;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::broadcast_shapes;

pub type NodeId = usize;

/// Elementwise instruction inside a fused node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EwKind {
    Add,
    Mul,
    Sigmoid,
    Relu,
    Scale { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    /// The i-th input of the fused node.
    Input(usize),
    /// The result of the j-th earlier instruction.
    Tmp(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instr {
    pub kind: EwKind,
    pub args: Vec<Operand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "attrs", rename_all = "snake_case")]
pub enum Op {
    Input {
        name: String,
    },
    /// Parameter constant; several names concatenate along the last axis.
    Const {
        names: Vec<String>,
    },
    Matmul,
    /// Inputs `x, w[, b]`.
    Linear,
    /// Inputs `x, gamma, beta`.
    LayerNorm {
        eps: f64,
    },
    Softmax {
        axis: usize,
    },
    /// Inputs `x[, mask][, bias]`.
    FusedSoftmax {
        axis: usize,
        mask: bool,
        bias: bool,
    },
    Sigmoid,
    Relu,
    Scale {
        factor: f64,
    },
    Add,
    Mul,
    Mean {
        axis: usize,
    },
    Sum {
        axis: usize,
    },
    Permute {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Along the last axis.
    Concat,
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// `[.., I] x [.., J] -> [.., I, J]`.
    Outer,
    /// `[S, I, P] x [S, J, Q] -> [I, J, P*Q]`.
    OuterMean,
    /// `[I, K, C] x [J, K, C] -> [I, J, C]`.
    ContractK,
    FusedElementwise {
        program: Vec<Instr>,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const { .. } => "const",
            Op::Matmul => "matmul",
            Op::Linear => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::FusedSoftmax { .. } => "fused_softmax",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Scale { .. } => "scale",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Outer => "outer",
            Op::OuterMean => "outer_mean",
            Op::ContractK => "contract_k",
            Op::FusedElementwise { .. } => "fused_elementwise",
        }
    }

    /// No inputs; holds no activation produced by the graph.
    pub fn is_source(&self) -> bool {
        matches!(self, Op::Input { .. } | Op::Const { .. })
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, Op::Add | Op::Mul | Op::Sigmoid | Op::Relu | Op::Scale { .. } | Op::FusedElementwise { .. })
    }
}

/// Where an output dimension comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimSource {
    /// Takes part in a reduction or normalization; never a chunk dimension.
    Compute,
    /// Slicing the listed `(input, dim)` pairs slices this output dim; inputs
    /// not listed are consumed whole.
    Flow(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimFlow {
    pub out: Vec<DimSource>,
    /// Per input, the dims reduced over or normalized along.
    pub input_compute: Vec<Vec<usize>>,
}

impl DimFlow {
    pub fn is_free(&self, d: usize) -> bool {
        matches!(self.out.get(d), Some(DimSource::Flow(_)))
    }

    pub fn sources(&self, d: usize) -> Option<&[(usize, usize)]> {
        match self.out.get(d) {
            Some(DimSource::Flow(v)) => Some(v),
            _ => None,
        }
    }

    /// The dim of input `k` that output dim `d` flows from, if any.
    pub fn input_dim(&self, d: usize, k: usize) -> Option<usize> {
        self.sources(d)?.iter().find(|(i, _)| *i == k).map(|(_, dim)| *dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    #[serde(flatten)]
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub dim_flow: DimFlow,
}

impl Node {
    pub fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
}

fn graph_err(msg: impl Into<String>) -> Error {
    Error::Graph(msg.into())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(graph_err(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn arity(op: &Op, n: usize) -> Result<()> {
    let ok = match op {
        Op::Input { .. } | Op::Const { .. } => n == 0,
        Op::Sigmoid | Op::Relu | Op::Scale { .. } | Op::Softmax { .. } | Op::Mean { .. } | Op::Sum { .. } => n == 1,
        Op::Permute { .. } | Op::Reshape { .. } | Op::Slice { .. } => n == 1,
        Op::Matmul | Op::Add | Op::Mul | Op::Outer | Op::OuterMean | Op::ContractK => n == 2,
        Op::Linear => n == 2 || n == 3,
        Op::LayerNorm { .. } => n == 3,
        Op::FusedSoftmax { mask, bias, .. } => n == 1 + *mask as usize + *bias as usize,
        Op::Concat | Op::FusedElementwise { .. } => n >= 1,
    };
    if ok {
        Ok(())
    } else {
        Err(graph_err(format!("{} does not take {n} inputs", op.kind())))
    }
}

fn check_program(program: &[Instr], n_inputs: usize) -> Result<()> {
    if program.is_empty() {
        return Err(graph_err("empty fused program"));
    }
    for (j, ins) in program.iter().enumerate() {
        let want = match ins.kind {
            EwKind::Add | EwKind::Mul => 2,
            _ => 1,
        };
        if ins.args.len() != want {
            return Err(graph_err(format!("fused instruction {j} has {} args", ins.args.len())));
        }
        for a in &ins.args {
            let ok = match *a {
                Operand::Input(i) => i < n_inputs,
                Operand::Tmp(t) => t < j,
            };
            if !ok {
                return Err(graph_err(format!("fused instruction {j} has bad operand {a:?}")));
            }
        }
    }
    Ok(())
}

/// Output shape of `op` applied to inputs of the given shapes. Source ops
/// have no inferable shape and are rejected here.
pub fn infer_shape(op: &Op, ins: &[&[usize]]) -> Result<Vec<usize>> {
    arity(op, ins.len())?;
    let bcast = |a: &[usize], b: &[usize]| broadcast_shapes(a, b).map_err(|e| graph_err(e.to_string()));
    match op {
        Op::Input { .. } | Op::Const { .. } => Err(graph_err("source nodes carry explicit shapes")),
        Op::Sigmoid | Op::Relu | Op::Scale { .. } => Ok(ins[0].to_vec()),
        Op::Add | Op::Mul => bcast(ins[0], ins[1]),
        Op::FusedElementwise { program } => {
            check_program(program, ins.len())?;
            let mut s = ins[0].to_vec();
            for x in &ins[1..] {
                s = bcast(&s, x)?;
            }
            Ok(s)
        }
        Op::Matmul => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
                return Err(graph_err(format!("matmul: {a:?} x {b:?}")));
            }
            let mut s = bcast(&a[..a.len() - 2], &b[..b.len() - 2])?;
            s.extend([a[a.len() - 2], b[b.len() - 1]]);
            Ok(s)
        }
        Op::Linear => {
            let (x, w) = (ins[0], ins[1]);
            if w.len() != 2 || x[x.len() - 1] != w[0] || ins.get(2).is_some_and(|b| *b != [w[1]]) {
                return Err(graph_err(format!("linear: x {x:?}, w {w:?}, b {:?}", ins.get(2))));
            }
            let mut s = x.to_vec();
            *s.last_mut().unwrap() = w[1];
            Ok(s)
        }
        Op::LayerNorm { .. } => {
            let c = *ins[0].last().unwrap();
            if ins[1] != [c] || ins[2] != [c] {
                return Err(graph_err(format!("layer_norm: x {:?}, gamma {:?}, beta {:?}", ins[0], ins[1], ins[2])));
            }
            Ok(ins[0].to_vec())
        }
        Op::Softmax { axis } => {
            check_axis("softmax", ins[0], *axis)?;
            Ok(ins[0].to_vec())
        }
        Op::FusedSoftmax { axis, .. } => {
            check_axis("fused_softmax", ins[0], *axis)?;
            for x in &ins[1..] {
                if bcast(ins[0], x)? != ins[0] {
                    return Err(graph_err(format!("fused_softmax: {x:?} does not broadcast to {:?}", ins[0])));
                }
            }
            Ok(ins[0].to_vec())
        }
        Op::Mean { axis } | Op::Sum { axis } => {
            check_axis(op.kind(), ins[0], *axis)?;
            let mut s = ins[0].to_vec();
            s.remove(*axis);
            if s.is_empty() {
                s.push(1);
            }
            Ok(s)
        }
        Op::Permute { perm } => {
            let r = ins[0].len();
            let mut seen = vec![false; r];
            if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
                return Err(graph_err(format!("permute: {perm:?} for rank {r}")));
            }
            Ok(perm.iter().map(|&p| ins[0][p]).collect())
        }
        Op::Reshape { shape } => {
            if shape.is_empty()
                || shape.contains(&0)
                || shape.iter().product::<usize>() != ins[0].iter().product::<usize>()
            {
                return Err(graph_err(format!("reshape: {:?} -> {shape:?}", ins[0])));
            }
            Ok(shape.clone())
        }
        Op::Concat => {
            let r = ins[0].len();
            let lead = &ins[0][..r - 1];
            if ins.iter().any(|s| s.len() != r || &s[..r - 1] != lead) {
                return Err(graph_err(format!("concat: {ins:?}")));
            }
            let mut s = lead.to_vec();
            s.push(ins.iter().map(|s| s[r - 1]).sum());
            Ok(s)
        }
        Op::Slice { axis, start, end } => {
            check_axis("slice", ins[0], *axis)?;
            if start >= end || *end > ins[0][*axis] {
                return Err(graph_err(format!("slice {start}..{end} of axis {axis} of {:?}", ins[0])));
            }
            let mut s = ins[0].to_vec();
            s[*axis] = end - start;
            Ok(s)
        }
        Op::Outer => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() != b.len() || a[..a.len() - 1] != b[..b.len() - 1] {
                return Err(graph_err(format!("outer: {a:?} x {b:?}")));
            }
            let mut s = a.to_vec();
            s.push(b[b.len() - 1]);
            Ok(s)
        }
        Op::OuterMean => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() != 3 || b.len() != 3 || a[0] != b[0] {
                return Err(graph_err(format!("outer_mean: {a:?} x {b:?}")));
            }
            Ok(vec![a[1], b[1], a[2] * b[2]])
        }
        Op::ContractK => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() != 3 || b.len() != 3 || a[1] != b[1] || a[2] != b[2] {
                return Err(graph_err(format!("contract_k: {a:?} x {b:?}")));
            }
            Ok(vec![a[0], b[0], a[2]])
        }
    }
}

/// Right-aligned broadcast flow: output dim `d` flows from every input whose
/// aligned extent equals the output extent.
fn broadcast_flow(ins: &[&[usize]], out: &[usize], skip: Option<usize>) -> Vec<DimSource> {
    (0..out.len())
        .map(|d| {
            if Some(d) == skip {
                return DimSource::Compute;
            }
            let src = ins
                .iter()
                .enumerate()
                .filter_map(|(k, s)| {
                    let pad = out.len() - s.len();
                    (d >= pad && s[d - pad] == out[d]).then(|| (k, d - pad))
                })
                .collect();
            DimSource::Flow(src)
        })
        .collect()
}

/// Dimension flow of `op` for the given input and output shapes.
pub fn dim_flow(op: &Op, ins: &[&[usize]], out: &[usize]) -> DimFlow {
    let none = || vec![Vec::new(); ins.len()];
    let last = |s: &[usize]| s.len() - 1;
    let (out_src, input_compute) = match op {
        Op::Input { .. } | Op::Const { .. } => ((0..out.len()).map(|_| DimSource::Flow(vec![])).collect(), none()),
        Op::Sigmoid | Op::Relu | Op::Scale { .. } | Op::Add | Op::Mul | Op::FusedElementwise { .. } => {
            (broadcast_flow(ins, out, None), none())
        }
        Op::Matmul => {
            let r = out.len();
            let (a, b) = (ins[0], ins[1]);
            let mut src = broadcast_flow(&[&a[..a.len() - 2], &b[..b.len() - 2]], &out[..r - 2], None);
            src.push(DimSource::Flow(vec![(0, a.len() - 2)]));
            src.push(DimSource::Flow(vec![(1, b.len() - 1)]));
            (src, vec![vec![a.len() - 1], vec![b.len() - 2]])
        }
        Op::Linear => {
            let r = out.len();
            let mut src: Vec<DimSource> = (0..r - 1).map(|d| DimSource::Flow(vec![(0, d)])).collect();
            let mut last_src = vec![(1, 1)];
            if ins.len() == 3 {
                last_src.push((2, 0));
            }
            src.push(DimSource::Flow(last_src));
            let mut comp = vec![vec![r - 1], vec![0]];
            if ins.len() == 3 {
                comp.push(vec![]);
            }
            (src, comp)
        }
        Op::LayerNorm { .. } => {
            let r = out.len();
            let mut src: Vec<DimSource> = (0..r - 1).map(|d| DimSource::Flow(vec![(0, d)])).collect();
            src.push(DimSource::Compute);
            (src, vec![vec![r - 1], vec![0], vec![0]])
        }
        Op::Softmax { axis } => (broadcast_flow(ins, out, Some(*axis)), vec![vec![*axis]]),
        Op::FusedSoftmax { axis, .. } => {
            let comp = ins
                .iter()
                .map(|s| {
                    let pad = out.len() - s.len();
                    if *axis >= pad && s[*axis - pad] == out[*axis] {
                        vec![*axis - pad]
                    } else {
                        vec![]
                    }
                })
                .collect();
            (broadcast_flow(ins, out, Some(*axis)), comp)
        }
        Op::Mean { axis } | Op::Sum { axis } => {
            let src = if ins[0].len() == 1 {
                vec![DimSource::Compute]
            } else {
                (0..out.len()).map(|d| DimSource::Flow(vec![(0, if d < *axis { d } else { d + 1 })])).collect()
            };
            (src, vec![vec![*axis]])
        }
        Op::Permute { perm } => (perm.iter().map(|&p| DimSource::Flow(vec![(0, p)])).collect(), none()),
        Op::Reshape { .. } => {
            let inp = ins[0];
            let prefix = inp.iter().zip(out).take_while(|(a, b)| a == b).count();
            // The last shared prefix dim only flows if everything after it is
            // merely regrouped, which holds for any prefix of equal extents.
            let src = (0..out.len())
                .map(|d| if d < prefix { DimSource::Flow(vec![(0, d)]) } else { DimSource::Compute })
                .collect();
            (src, vec![(prefix..inp.len()).collect()])
        }
        Op::Concat => {
            let r = out.len();
            let mut src: Vec<DimSource> =
                (0..r - 1).map(|d| DimSource::Flow((0..ins.len()).map(|k| (k, d)).collect())).collect();
            src.push(DimSource::Compute);
            (src, ins.iter().map(|s| vec![last(s)]).collect())
        }
        Op::Slice { axis, .. } => {
            let src = (0..out.len())
                .map(|d| if d == *axis { DimSource::Compute } else { DimSource::Flow(vec![(0, d)]) })
                .collect();
            (src, vec![vec![*axis]])
        }
        Op::Outer => {
            let r = out.len();
            let mut src: Vec<DimSource> = (0..r - 2).map(|d| DimSource::Flow(vec![(0, d), (1, d)])).collect();
            src.push(DimSource::Flow(vec![(0, r - 2)]));
            src.push(DimSource::Flow(vec![(1, r - 2)]));
            (src, none())
        }
        Op::OuterMean => (
            vec![DimSource::Flow(vec![(0, 1)]), DimSource::Flow(vec![(1, 1)]), DimSource::Compute],
            vec![vec![0, 2], vec![0, 2]],
        ),
        Op::ContractK => (
            vec![DimSource::Flow(vec![(0, 0)]), DimSource::Flow(vec![(1, 0)]), DimSource::Flow(vec![(0, 2), (1, 2)])],
            vec![vec![1], vec![1]],
        ),
    };
    DimFlow { out: out_src, input_compute }
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    /// Consumers of every node, ascending and with repeats collapsed.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut c = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                if c[i].last() != Some(&n.id) {
                    c[i].push(n.id);
                }
            }
        }
        c
    }

    pub fn is_output(&self, id: NodeId) -> bool {
        self.outputs.contains(&id)
    }

    pub fn input_names(&self) -> Vec<String> {
        self.inputs
            .iter()
            .map(|&i| match &self.nodes[i].op {
                Op::Input { name } => name.clone(),
                _ => unreachable!("validated graph"),
            })
            .collect()
    }

    /// Number of non-source nodes.
    pub fn compute_len(&self) -> usize {
        self.nodes.iter().filter(|n| !n.op.is_source()).count()
    }

    /// Checks ids, topological order, shapes, dim flows and the input/output lists.
    pub fn validate(&self) -> Result<()> {
        for (pos, n) in self.nodes.iter().enumerate() {
            if n.id != pos {
                return Err(graph_err(format!("node at position {pos} has id {}", n.id)));
            }
            if let Some(&bad) = n.inputs.iter().find(|&&i| i >= pos) {
                return Err(graph_err(format!("node {pos} references node {bad}, which is not earlier")));
            }
            if n.shape.is_empty() || n.shape.contains(&0) {
                return Err(graph_err(format!("node {pos} has invalid shape {:?}", n.shape)));
            }
            let ins: Vec<&[usize]> = n.inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
            if n.op.is_source() {
                arity(&n.op, ins.len())?;
                if let Op::Const { names } = &n.op {
                    if names.is_empty() {
                        return Err(graph_err(format!("const node {pos} has no names")));
                    }
                }
            } else {
                let s = infer_shape(&n.op, &ins).map_err(|e| graph_err(format!("node {pos}: {e}")))?;
                if s != n.shape {
                    return Err(graph_err(format!("node {pos} declares shape {:?}, inferred {s:?}", n.shape)));
                }
            }
            if dim_flow(&n.op, &ins, &n.shape) != n.dim_flow {
                return Err(graph_err(format!("node {pos} has an inconsistent dim_flow")));
            }
        }
        let declared: Vec<NodeId> =
            self.nodes.iter().filter(|n| matches!(n.op, Op::Input { .. })).map(|n| n.id).collect();
        if declared != self.inputs {
            return Err(graph_err(format!("inputs {:?} do not list the input nodes {declared:?}", self.inputs)));
        }
        let mut names: Vec<String> = self.input_names();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(graph_err("duplicate input names"));
        }
        if self.outputs.is_empty() {
            return Err(graph_err("graph has no outputs"));
        }
        if let Some(&o) = self.outputs.iter().find(|&&o| o >= self.nodes.len()) {
            return Err(graph_err(format!("output {o} does not exist")));
        }
        Ok(())
    }
}

/// Incremental graph construction with shape inference.
///
/// [`GraphBuilder::build`] moves input and constant nodes to the front
/// (inputs first), keeping relative order, and renumbers ids.
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let ins: Vec<&[usize]> = inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
        let dim_flow = dim_flow(&op, &ins, &shape);
        let id = self.nodes.len();
        self.nodes.push(Node { id, op, inputs, shape, dim_flow });
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.into() }, vec![], shape.to_vec())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Const { names: vec![name.into()] }, vec![], shape.to_vec())
    }

    /// Constant formed by concatenating named parameters along the last axis.
    pub fn constant_parts(&mut self, names: Vec<String>, shape: &[usize]) -> NodeId {
        self.push(Op::Const { names }, vec![], shape.to_vec())
    }

    pub fn op(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(graph_err(format!("unknown input node {bad}")));
        }
        let ins: Vec<&[usize]> = inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
        let shape = infer_shape(&op, &ins)?;
        Ok(self.push(op, inputs.to_vec(), shape))
    }

    /// Finishes the graph; returns it with the renumbering `old id -> new id`.
    pub fn build_mapped(self, outputs: &[NodeId]) -> Result<(Graph, Vec<NodeId>)> {
        let rank = |n: &Node| match n.op {
            Op::Input { .. } => 0,
            Op::Const { .. } => 1,
            _ => 2,
        };
        let mut order: Vec<NodeId> = (0..self.nodes.len()).collect();
        order.sort_by_key(|&i| rank(&self.nodes[i]));
        let mut map = vec![0; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            map[old] = new;
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(order.len());
        for &old in &order {
            let mut n = self.nodes[old].clone();
            n.id = map[old];
            n.inputs = n.inputs.iter().map(|&i| map[i]).collect();
            nodes.push(n);
        }
        let inputs = nodes.iter().filter(|n| matches!(n.op, Op::Input { .. })).map(|n| n.id).collect();
        let outputs = outputs
            .iter()
            .map(|&o| map.get(o).copied().ok_or_else(|| graph_err(format!("unknown output {o}"))))
            .collect::<Result<_>>()?;
        let g = Graph { nodes, inputs, outputs };
        g.validate()?;
        Ok((g, map))
    }

    pub fn build(self, outputs: &[NodeId]) -> Result<Graph> {
        Ok(self.build_mapped(outputs)?.0)
    }
}

#[cfg(test)]
mod tests;
