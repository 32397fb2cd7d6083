//! Seeded random graphs for estimator and search properties.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bindings, Graph, GraphBuilder, NodeId, Op};
use crate::error::Result;
use crate::tensor::{untracked, Tensor, LN_EPS};

pub struct RandomGraph {
    pub graph: Graph,
    pub bindings: Bindings,
}

struct Gen {
    rng: ChaCha8Rng,
    b: GraphBuilder,
    binds: Bindings,
    pool: Vec<NodeId>,
    consts: usize,
}

impl Gen {
    fn value(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let seed = self.rng.gen();
        untracked(|| Tensor::rand_uniform(shape, scale, seed))
    }

    fn constant(&mut self, shape: &[usize]) -> NodeId {
        let name = format!("c{}", self.consts);
        self.consts += 1;
        let v = self.value(shape, 0.5);
        self.binds.insert(&name, v);
        self.b.constant(&name, shape)
    }

    fn shape(&self, id: NodeId) -> Vec<usize> {
        self.b.shape(id).to_vec()
    }

    fn pick(&mut self) -> NodeId {
        // Favour recent nodes so graphs are deep rather than wide.
        let n = self.pool.len();
        let back = self.rng.gen_range(0..n.min(4));
        self.pool[n - 1 - back]
    }

    fn partner(&mut self, x: NodeId) -> Option<NodeId> {
        let s = self.shape(x);
        let same: Vec<NodeId> = self.pool.iter().copied().filter(|&p| p != x && self.shape(p) == s).collect();
        same.choose(&mut self.rng).copied()
    }

    fn step(&mut self) -> Result<Option<NodeId>> {
        let x = self.pick();
        let s = self.shape(x);
        let r = s.len();
        let last = s[r - 1];
        let choice = self.rng.gen_range(0..14);
        let id = match choice {
            0 => self.b.op(Op::Sigmoid, &[x])?,
            1 => self.b.op(Op::Relu, &[x])?,
            2 => {
                let f = self.rng.gen_range(0.5..2.0);
                self.b.op(Op::Scale { factor: f }, &[x])?
            }
            3 | 4 => {
                let other = match self.partner(x) {
                    Some(p) if self.rng.gen_bool(0.6) => p,
                    _ => self.constant(&[last]),
                };
                let op = if choice == 3 { Op::Add } else { Op::Mul };
                self.b.op(op, &[x, other])?
            }
            5 => {
                let out = self.rng.gen_range(2..=6);
                let w = self.constant(&[last, out]);
                if self.rng.gen_bool(0.5) {
                    let bias = self.constant(&[out]);
                    self.b.op(Op::Linear, &[x, w, bias])?
                } else {
                    self.b.op(Op::Linear, &[x, w])?
                }
            }
            6 => {
                let g = self.constant(&[last]);
                let be = self.constant(&[last]);
                self.b.op(Op::LayerNorm { eps: LN_EPS }, &[x, g, be])?
            }
            7 => {
                let axis = self.rng.gen_range(0..r);
                self.b.op(Op::Softmax { axis }, &[x])?
            }
            8 if r >= 2 => {
                if self.rng.gen_bool(0.5) {
                    let mut perm: Vec<usize> = (0..r).collect();
                    perm.swap(r - 2, r - 1);
                    let t = self.b.op(Op::Permute { perm }, &[x])?;
                    self.b.op(Op::Matmul, &[x, t])?
                } else {
                    let n = self.rng.gen_range(2..=6);
                    let w = self.constant(&[last, n]);
                    self.b.op(Op::Matmul, &[x, w])?
                }
            }
            9 if r >= 2 => {
                let axis = self.rng.gen_range(0..r);
                let op = if self.rng.gen_bool(0.5) { Op::Sum { axis } } else { Op::Mean { axis } };
                self.b.op(op, &[x])?
            }
            10 if r >= 2 => {
                let mut perm: Vec<usize> = (0..r).collect();
                perm.shuffle(&mut self.rng);
                self.b.op(Op::Permute { perm }, &[x])?
            }
            11 if r <= 2 => {
                let y = self.partner(x).unwrap_or(x);
                self.b.op(Op::Outer, &[x, y])?
            }
            12 => {
                if last >= 2 && self.rng.gen_bool(0.5) {
                    let start = self.rng.gen_range(0..last - 1);
                    let end = self.rng.gen_range(start + 1..=last);
                    self.b.op(Op::Slice { axis: r - 1, start, end }, &[x])?
                } else {
                    let y = self.partner(x).unwrap_or(x);
                    self.b.op(Op::Concat, &[x, y])?
                }
            }
            13 if r >= 3 => {
                let mut shape = s[..r - 2].to_vec();
                shape.push(s[r - 2] * s[r - 1]);
                self.b.op(Op::Reshape { shape }, &[x])?
            }
            13 if last.is_multiple_of(2) && r < 4 => {
                let mut shape = s[..r - 1].to_vec();
                shape.extend([2, last / 2]);
                self.b.op(Op::Reshape { shape }, &[x])?
            }
            _ => return Ok(None),
        };
        // Keep activations small enough for fast exhaustive checks.
        if self.b.shape(id).iter().product::<usize>() > 4096 {
            let axis = self.b.shape(id).len() - 1;
            let y = self.b.op(Op::Sum { axis }, &[id])?;
            return Ok(Some(y));
        }
        Ok(Some(id))
    }
}

/// A random valid graph with 1-3 inputs and 4-16 compute nodes.
pub fn random_graph(seed: u64) -> Result<RandomGraph> {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        b: GraphBuilder::new(),
        binds: Bindings::new(),
        pool: Vec::new(),
        consts: 0,
    };
    let n_inputs = g.rng.gen_range(1..=3);
    let rank = g.rng.gen_range(2..=3);
    let base: Vec<usize> = (0..rank).map(|_| g.rng.gen_range(2..=8)).collect();
    for i in 0..n_inputs {
        let name = format!("x{i}");
        let v = g.value(&base, 1.0);
        g.binds.insert(&name, v);
        let id = g.b.input(&name, &base);
        g.pool.push(id);
    }
    let target = g.rng.gen_range(4..=16);
    let mut made = Vec::new();
    while made.len() < target {
        if let Some(id) = g.step()? {
            g.pool.push(id);
            made.push(id);
        }
    }
    let mut outputs = vec![*made.last().unwrap()];
    if made.len() > 2 && g.rng.gen_bool(0.5) {
        let extra = made[g.rng.gen_range(0..made.len() - 1)];
        outputs.push(extra);
    }
    Ok(RandomGraph { graph: g.b.build(&outputs)?, bindings: g.binds })
}
