//! Records the evoformer block as a graph by running it on a tracing backend.

use std::collections::BTreeMap;

use super::{Graph, GraphBuilder, NodeId, Op};
use crate::error::Result;
use crate::evoformer::{self, Backend, BlockParams, EvoConfig};
use crate::tensor::LN_EPS;

/// [`Backend`] whose values are graph nodes. Parameters become constant
/// nodes, one per name.
pub struct Tracer<'p> {
    pub builder: GraphBuilder,
    params: &'p BlockParams,
    consts: BTreeMap<String, NodeId>,
}

impl<'p> Tracer<'p> {
    pub fn new(params: &'p BlockParams) -> Self {
        Tracer { builder: GraphBuilder::new(), params, consts: BTreeMap::new() }
    }

    fn op(&mut self, op: Op, ins: &[NodeId]) -> Result<NodeId> {
        self.builder.op(op, ins)
    }
}

impl Backend for Tracer<'_> {
    type Value = NodeId;

    fn shape(&self, v: &NodeId) -> Vec<usize> {
        self.builder.shape(*v).to_vec()
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.consts.get(name) {
            return Ok(id);
        }
        let shape = self.params.get(name)?.shape().to_vec();
        let id = self.builder.constant(name, &shape);
        self.consts.insert(name.to_string(), id);
        Ok(id)
    }

    fn linear(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>) -> Result<NodeId> {
        match b {
            Some(b) => self.op(Op::Linear, &[*x, *w, *b]),
            None => self.op(Op::Linear, &[*x, *w]),
        }
    }

    fn layernorm(&mut self, x: &NodeId, g: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.op(Op::LayerNorm { eps: LN_EPS }, &[*x, *g, *b])
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.op(Op::Add, &[*a, *b])
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.op(Op::Mul, &[*a, *b])
    }

    fn sigmoid(&mut self, x: &NodeId) -> Result<NodeId> {
        self.op(Op::Sigmoid, &[*x])
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        self.op(Op::Relu, &[*x])
    }

    fn scale(&mut self, x: &NodeId, factor: f64) -> Result<NodeId> {
        self.op(Op::Scale { factor }, &[*x])
    }

    fn softmax(&mut self, x: &NodeId, axis: usize) -> Result<NodeId> {
        self.op(Op::Softmax { axis }, &[*x])
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.op(Op::Matmul, &[*a, *b])
    }

    fn permute(&mut self, x: &NodeId, perm: &[usize]) -> Result<NodeId> {
        self.op(Op::Permute { perm: perm.to_vec() }, &[*x])
    }

    fn reshape(&mut self, x: &NodeId, shape: &[usize]) -> Result<NodeId> {
        self.op(Op::Reshape { shape: shape.to_vec() }, &[*x])
    }

    fn outer_mean(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.op(Op::OuterMean, &[*a, *b])
    }

    fn contract_k(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.op(Op::ContractK, &[*a, *b])
    }
}

/// Graph of one evoformer block with inputs `m`, `z` and outputs `m'`, `z'`.
pub fn trace_evoformer(cfg: &EvoConfig, p: &BlockParams) -> Result<Graph> {
    cfg.validate()?;
    if p.config != *cfg {
        return Err(crate::Error::Config("parameters were generated for a different config".into()));
    }
    let mut t = Tracer::new(p);
    let m = t.builder.input("m", &cfg.msa_shape());
    let z = t.builder.input("z", &cfg.pair_shape());
    let (m2, z2) = evoformer::evoformer_block_with(&mut t, cfg, &m, &z)?;
    t.builder.build(&[m2, z2])
}
