//! Single-device reference evoformer block.
//!
//! The sub-modules are generic over [`Backend`] so the same code drives
//! eager evaluation, graph tracing and the per-device pieces of the sharded
//! block. Public free functions evaluate eagerly.

mod backend;
pub mod params;

pub use backend::{Backend, Eager};
pub use params::{BlockParams, EvoConfig, PARAMS_SCHEMA};

use crate::error::Result;
use crate::tensor::Tensor;

/// Source of the additive attention bias.
pub enum AttnBias<V> {
    None,
    /// Pair-derived bias `[L, L, H]` (query, key, head), shared across the batch axis.
    Pair(V),
    /// Per-(batch, key) bias derived from the attended tensor itself.
    Key,
}

fn layer_norm<B: Backend>(b: &mut B, x: &B::Value, prefix: &str) -> Result<B::Value> {
    let g = b.param(&format!("{prefix}.gamma"))?;
    let be = b.param(&format!("{prefix}.beta"))?;
    b.layernorm(x, &g, &be)
}

fn dense<B: Backend>(b: &mut B, x: &B::Value, prefix: &str, bias: bool) -> Result<B::Value> {
    let w = b.param(&format!("{prefix}.w"))?;
    if bias {
        let bb = b.param(&format!("{prefix}.b"))?;
        b.linear(x, &w, Some(&bb))
    } else {
        b.linear(x, &w, None)
    }
}

/// `Linear(LayerNorm(z))` for the MSA row attention bias: `[R, R, H]`.
pub fn pair_bias_raw<B: Backend>(b: &mut B, z: &B::Value, prefix: &str) -> Result<B::Value> {
    let zn = layer_norm(b, z, &format!("{prefix}.ln_z"))?;
    dense(b, &zn, &format!("{prefix}.bias"), false)
}

/// Gated multi-head self-attention over axis 1 of `x: [B, L, C]`.
///
/// Logits are `(q.k + bias) / sqrt(c)`, computed as `(q / sqrt(c)).k + bias / sqrt(c)`;
/// the gate reads the un-normalized input.
pub fn gated_attention<B: Backend>(
    b: &mut B,
    x: &B::Value,
    bias: AttnBias<B::Value>,
    prefix: &str,
    heads: usize,
) -> Result<B::Value> {
    let shape = b.shape(x);
    let (bn, l, c_in) = (shape[0], shape[1], shape[2]);
    let c = c_in / heads;
    let inv = 1.0 / (c as f64).sqrt();
    let xn = layer_norm(b, x, &format!("{prefix}.ln"))?;

    let bias = match bias {
        AttnBias::None => None,
        AttnBias::Pair(raw) => {
            let t = b.permute(&raw, &[2, 0, 1])?;
            Some(b.scale(&t, inv)?)
        }
        AttnBias::Key => {
            let raw = dense(b, &xn, &format!("{prefix}.bias"), false)?;
            let t = b.permute(&raw, &[0, 2, 1])?;
            let t = b.reshape(&t, &[bn, heads, 1, l])?;
            Some(b.scale(&t, inv)?)
        }
    };

    let q = dense(b, &xn, &format!("{prefix}.q"), false)?;
    let k = dense(b, &xn, &format!("{prefix}.k"), false)?;
    let v = dense(b, &xn, &format!("{prefix}.v"), false)?;
    let q = b.reshape(&q, &[bn, l, heads, c])?;
    let q = b.permute(&q, &[0, 2, 1, 3])?;
    let q = b.scale(&q, inv)?;
    let k = b.reshape(&k, &[bn, l, heads, c])?;
    let k = b.permute(&k, &[0, 2, 3, 1])?;
    let v = b.reshape(&v, &[bn, l, heads, c])?;
    let v = b.permute(&v, &[0, 2, 1, 3])?;

    let scores = b.matmul(&q, &k)?;
    let logits = match &bias {
        Some(bias) => b.add(&scores, bias)?,
        None => scores,
    };
    let attn = b.softmax(&logits, 3)?;
    let o = b.matmul(&attn, &v)?;
    let o = b.permute(&o, &[0, 2, 1, 3])?;
    let o = b.reshape(&o, &[bn, l, c_in])?;

    let gate = dense(b, x, &format!("{prefix}.gate"), true)?;
    let gate = b.sigmoid(&gate)?;
    let o = b.mul(&o, &gate)?;
    dense(b, &o, &format!("{prefix}.out"), true)
}

pub fn msa_row_attention_with<B: Backend>(b: &mut B, m: &B::Value, z: &B::Value, heads: usize) -> Result<B::Value> {
    let raw = pair_bias_raw(b, z, "msa_row")?;
    gated_attention(b, m, AttnBias::Pair(raw), "msa_row", heads)
}

pub fn msa_col_attention_with<B: Backend>(b: &mut B, m: &B::Value, heads: usize) -> Result<B::Value> {
    let mt = b.permute(m, &[1, 0, 2])?;
    let o = gated_attention(b, &mt, AttnBias::None, "msa_col", heads)?;
    b.permute(&o, &[1, 0, 2])
}

pub fn pair_attention_row_with<B: Backend>(b: &mut B, z: &B::Value, heads: usize) -> Result<B::Value> {
    gated_attention(b, z, AttnBias::Key, "pair_row", heads)
}

pub fn pair_attention_col_with<B: Backend>(b: &mut B, z: &B::Value, heads: usize) -> Result<B::Value> {
    let zt = b.permute(z, &[1, 0, 2])?;
    let o = gated_attention(b, &zt, AttnBias::Key, "pair_col", heads)?;
    b.permute(&o, &[1, 0, 2])
}

pub fn transition_with<B: Backend>(b: &mut B, x: &B::Value, prefix: &str) -> Result<B::Value> {
    let xn = layer_norm(b, x, &format!("{prefix}.ln"))?;
    let h = dense(b, &xn, &format!("{prefix}.lin1"), true)?;
    let h = b.relu(&h)?;
    dense(b, &h, &format!("{prefix}.lin2"), true)
}

/// Left and right projections `[S, R, P]` of the outer product mean.
pub fn opm_projections<B: Backend>(b: &mut B, m: &B::Value) -> Result<(B::Value, B::Value)> {
    let mn = layer_norm(b, m, "opm.ln")?;
    let a = dense(b, &mn, "opm.a", true)?;
    let bb = dense(b, &mn, "opm.b", true)?;
    Ok((a, bb))
}

/// `Linear(flatten(mean_s(a_si ⊗ b_sj)))` for the rows of `a` against all of `b`.
pub fn opm_finish<B: Backend>(b: &mut B, a: &B::Value, bb: &B::Value) -> Result<B::Value> {
    let o = b.outer_mean(a, bb)?;
    dense(b, &o, "opm.out", true)
}

pub fn outer_product_mean_with<B: Backend>(b: &mut B, m: &B::Value) -> Result<B::Value> {
    let (a, bb) = opm_projections(b, m)?;
    opm_finish(b, &a, &bb)
}

/// Gate `g` and gated projections `a`, `b` of a triangular update.
pub fn tri_projections<B: Backend>(b: &mut B, z: &B::Value, prefix: &str) -> Result<(B::Value, B::Value, B::Value)> {
    let zn = layer_norm(b, z, &format!("{prefix}.ln_in"))?;
    let g = dense(b, &zn, &format!("{prefix}.gate"), true)?;
    let g = b.sigmoid(&g)?;
    let mut side = |name: &str| -> Result<B::Value> {
        let gate = dense(b, &zn, &format!("{prefix}.{name}_gate"), true)?;
        let proj = dense(b, &zn, &format!("{prefix}.{name}_proj"), true)?;
        let gate = b.sigmoid(&gate)?;
        b.mul(&gate, &proj)
    };
    let a = side("a")?;
    let bb = side("b")?;
    Ok((g, a, bb))
}

fn tri_output<B: Backend>(b: &mut B, g: &B::Value, x: &B::Value, prefix: &str) -> Result<B::Value> {
    let x = layer_norm(b, x, &format!("{prefix}.ln_out"))?;
    let x = dense(b, &x, &format!("{prefix}.out"), true)?;
    b.mul(g, &x)
}

/// `g_ij * Linear(LN(sum_k a_ik * b_jk))`; `a`/`g` may hold a subset of rows.
pub fn tri_finish_outgoing<B: Backend>(b: &mut B, g: &B::Value, a: &B::Value, bb: &B::Value) -> Result<B::Value> {
    let x = b.contract_k(a, bb)?;
    tri_output(b, g, &x, "tri_out")
}

/// `g_ij * Linear(LN(sum_k a_ki * b_kj))`; `b`/`g` may hold a subset of columns.
pub fn tri_finish_incoming<B: Backend>(b: &mut B, g: &B::Value, a: &B::Value, bb: &B::Value) -> Result<B::Value> {
    let at = b.permute(a, &[1, 0, 2])?;
    let bt = b.permute(bb, &[1, 0, 2])?;
    let x = b.contract_k(&at, &bt)?;
    tri_output(b, g, &x, "tri_in")
}

pub fn tri_update_outgoing_with<B: Backend>(b: &mut B, z: &B::Value) -> Result<B::Value> {
    let (g, a, bb) = tri_projections(b, z, "tri_out")?;
    tri_finish_outgoing(b, &g, &a, &bb)
}

pub fn tri_update_incoming_with<B: Backend>(b: &mut B, z: &B::Value) -> Result<B::Value> {
    let (g, a, bb) = tri_projections(b, z, "tri_in")?;
    tri_finish_incoming(b, &g, &a, &bb)
}

/// The full block: MSA stack, outer product mean into the pair, pair stack.
/// Every sub-module is applied with a residual addition.
pub fn evoformer_block_with<B: Backend>(
    b: &mut B,
    cfg: &EvoConfig,
    m: &B::Value,
    z: &B::Value,
) -> Result<(B::Value, B::Value)> {
    let d = msa_row_attention_with(b, m, z, cfg.n_head_msa)?;
    let m = b.add(m, &d)?;
    let d = msa_col_attention_with(b, &m, cfg.n_head_msa)?;
    let m = b.add(&m, &d)?;
    let d = transition_with(b, &m, "msa_transition")?;
    let m = b.add(&m, &d)?;

    let d = outer_product_mean_with(b, &m)?;
    let z = b.add(z, &d)?;
    let d = tri_update_outgoing_with(b, &z)?;
    let z = b.add(&z, &d)?;
    let d = tri_update_incoming_with(b, &z)?;
    let z = b.add(&z, &d)?;
    let d = pair_attention_row_with(b, &z, cfg.n_head_pair)?;
    let z = b.add(&z, &d)?;
    let d = pair_attention_col_with(b, &z, cfg.n_head_pair)?;
    let z = b.add(&z, &d)?;
    let d = transition_with(b, &z, "pair_transition")?;
    let z = b.add(&z, &d)?;
    Ok((m, z))
}

fn check_msa(p: &BlockParams, m: &Tensor) -> Result<()> {
    p.config.check_inputs(m.shape(), &p.config.pair_shape())
}

fn check_pair(p: &BlockParams, z: &Tensor) -> Result<()> {
    p.config.check_inputs(&p.config.msa_shape(), z.shape())
}

pub fn msa_row_attention(m: &Tensor, z: &Tensor, p: &BlockParams) -> Result<Tensor> {
    p.config.check_inputs(m.shape(), z.shape())?;
    msa_row_attention_with(&mut Eager::new(p), m, z, p.config.n_head_msa)
}

pub fn msa_col_attention(m: &Tensor, p: &BlockParams) -> Result<Tensor> {
    check_msa(p, m)?;
    msa_col_attention_with(&mut Eager::new(p), m, p.config.n_head_msa)
}

/// Feed-forward block; `prefix` is `msa_transition` or `pair_transition`.
pub fn transition(x: &Tensor, p: &BlockParams, prefix: &str) -> Result<Tensor> {
    transition_with(&mut Eager::new(p), x, prefix)
}

pub fn outer_product_mean(m: &Tensor, p: &BlockParams) -> Result<Tensor> {
    check_msa(p, m)?;
    outer_product_mean_with(&mut Eager::new(p), m)
}

pub fn tri_update_outgoing(z: &Tensor, p: &BlockParams) -> Result<Tensor> {
    check_pair(p, z)?;
    tri_update_outgoing_with(&mut Eager::new(p), z)
}

pub fn tri_update_incoming(z: &Tensor, p: &BlockParams) -> Result<Tensor> {
    check_pair(p, z)?;
    tri_update_incoming_with(&mut Eager::new(p), z)
}

pub fn pair_attention_row(z: &Tensor, p: &BlockParams) -> Result<Tensor> {
    check_pair(p, z)?;
    pair_attention_row_with(&mut Eager::new(p), z, p.config.n_head_pair)
}

pub fn pair_attention_col(z: &Tensor, p: &BlockParams) -> Result<Tensor> {
    check_pair(p, z)?;
    pair_attention_col_with(&mut Eager::new(p), z, p.config.n_head_pair)
}

pub fn evoformer_block(m: &Tensor, z: &Tensor, p: &BlockParams) -> Result<(Tensor, Tensor)> {
    p.config.check_inputs(m.shape(), z.shape())?;
    evoformer_block_with(&mut Eager::new(p), &p.config, m, z)
}

/// Seeded random MSA and pair inputs for a config.
pub fn random_inputs(cfg: &EvoConfig, seed: u64) -> (Tensor, Tensor) {
    let m = Tensor::rand_uniform(&cfg.msa_shape(), 1.0, seed.wrapping_mul(2).wrapping_add(1));
    let z = Tensor::rand_uniform(&cfg.pair_shape(), 1.0, seed.wrapping_mul(2).wrapping_add(2));
    (m, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;

    fn small(n_seq: usize, n_res: usize) -> EvoConfig {
        EvoConfig { n_seq, n_res, ..EvoConfig::default() }
    }

    fn setup(cfg: &EvoConfig, seed: u64) -> (BlockParams, Tensor, Tensor) {
        let p = BlockParams::random(cfg, seed).unwrap();
        let (m, z) = random_inputs(cfg, seed);
        (p, m, z)
    }

    /// Eager backend that checks every softmax slice sums to one.
    struct Probe<'p> {
        inner: Eager<'p>,
        softmaxes: usize,
    }

    impl Backend for Probe<'_> {
        type Value = Tensor;
        fn shape(&self, v: &Tensor) -> Vec<usize> {
            self.inner.shape(v)
        }
        fn param(&mut self, n: &str) -> Result<Tensor> {
            self.inner.param(n)
        }
        fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
            self.inner.linear(x, w, b)
        }
        fn layernorm(&mut self, x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.inner.layernorm(x, g, b)
        }
        fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.inner.add(a, b)
        }
        fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.inner.mul(a, b)
        }
        fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
            self.inner.sigmoid(x)
        }
        fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
            self.inner.relu(x)
        }
        fn scale(&mut self, x: &Tensor, f: f64) -> Result<Tensor> {
            self.inner.scale(x, f)
        }
        fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
            assert_eq!(axis, x.rank() - 1);
            let y = self.inner.softmax(x, axis)?;
            let n = *y.shape().last().unwrap();
            for row in y.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            self.softmaxes += 1;
            Ok(y)
        }
        fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.inner.matmul(a, b)
        }
        fn permute(&mut self, x: &Tensor, p: &[usize]) -> Result<Tensor> {
            self.inner.permute(x, p)
        }
        fn reshape(&mut self, x: &Tensor, s: &[usize]) -> Result<Tensor> {
            self.inner.reshape(x, s)
        }
        fn outer_mean(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.inner.outer_mean(a, b)
        }
        fn contract_k(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.inner.contract_k(a, b)
        }
    }

    #[test]
    fn attention_weights_are_normalized() {
        let cfg = small(3, 5);
        let (p, m, z) = setup(&cfg, 1);
        let mut probe = Probe { inner: Eager::new(&p), softmaxes: 0 };
        evoformer_block_with(&mut probe, &cfg, &m, &z).unwrap();
        assert_eq!(probe.softmaxes, 4);
    }

    #[test]
    fn shapes_are_preserved() {
        let cfg = small(3, 5);
        let (p, m, z) = setup(&cfg, 2);
        let (m2, z2) = evoformer_block(&m, &z, &p).unwrap();
        assert_eq!(m2.shape(), m.shape());
        assert_eq!(z2.shape(), z.shape());
        assert_eq!(transition(&m, &p, "msa_transition").unwrap().shape(), m.shape());
        assert_eq!(transition(&z, &p, "pair_transition").unwrap().shape(), z.shape());
    }

    #[test]
    fn singleton_attention_is_gated_value() {
        let cfg = small(1, 1);
        let (p, m, z) = setup(&cfg, 3);
        let got = msa_row_attention(&m, &z, &p).unwrap();
        let xn = tensor::layernorm(
            &m,
            p.get("msa_row.ln.gamma").unwrap(),
            p.get("msa_row.ln.beta").unwrap(),
            tensor::LN_EPS,
        )
        .unwrap();
        let v = tensor::linear(&xn, p.get("msa_row.v.w").unwrap(), None).unwrap();
        let g = tensor::linear(&m, p.get("msa_row.gate.w").unwrap(), Some(p.get("msa_row.gate.b").unwrap())).unwrap();
        let o = tensor::mul(&v, &tensor::sigmoid(&g)).unwrap();
        let want = tensor::linear(&o, p.get("msa_row.out.w").unwrap(), Some(p.get("msa_row.out.b").unwrap())).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn closed_gate_leaves_output_bias() {
        let cfg = small(2, 3);
        let (mut p, m, z) = setup(&cfg, 4);
        p.set("msa_row.gate.w", Tensor::zeros(&[8, 8])).unwrap();
        p.set("msa_row.gate.b", Tensor::full(&[8], -1e30)).unwrap();
        let got = msa_row_attention(&m, &z, &p).unwrap();
        let bias = p.get("msa_row.out.b").unwrap().data().to_vec();
        for row in got.data().chunks(8) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn zero_weights_are_identity_block() {
        let cfg = small(2, 4);
        let p = BlockParams::zeros(&cfg).unwrap();
        let (m, z) = random_inputs(&cfg, 5);
        let (m2, z2) = evoformer_block(&m, &z, &p).unwrap();
        assert!(m2.bit_eq(&m));
        assert!(z2.bit_eq(&z));
        assert!(transition(&m, &p, "msa_transition").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_biases_propagate_through_zero_weights() {
        let cfg = small(2, 4);
        let mut p = BlockParams::zeros(&cfg).unwrap();
        p.set("pair_transition.lin2.b", Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        p.set("opm.out.b", Tensor::full(&[4], 0.5)).unwrap();
        let (m, z) = random_inputs(&cfg, 6);
        let (m2, z2) = evoformer_block(&m, &z, &p).unwrap();
        assert!(m2.bit_eq(&m));
        for (i, (a, b)) in z2.data().iter().zip(z.data()).enumerate() {
            let want = b + 0.5 + [1.0, 2.0, 3.0, 4.0][i % 4];
            assert!((a - want).abs() <= 1e-12);
        }
    }

    fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
        let parts: Vec<Tensor> = order.iter().map(|&i| tensor::slice_axis(t, 0, i, i + 1).unwrap()).collect();
        let mut out = Tensor::zeros(t.shape());
        for (k, part) in parts.iter().enumerate() {
            tensor::write_slice(&mut out, 0, k, part).unwrap();
        }
        out
    }

    #[test]
    fn row_attention_is_equivariant_over_sequences() {
        let cfg = small(4, 5);
        let (p, m, z) = setup(&cfg, 7);
        let order = [2, 0, 3, 1];
        let a = permute_rows(&msa_row_attention(&m, &z, &p).unwrap(), &order);
        let b = msa_row_attention(&permute_rows(&m, &order), &z, &p).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn col_attention_is_equivariant_over_sequences() {
        let cfg = small(4, 5);
        let (p, m, _) = setup(&cfg, 8);
        let order = [3, 1, 0, 2];
        let a = permute_rows(&msa_col_attention(&m, &p).unwrap(), &order);
        let b = msa_col_attention(&permute_rows(&m, &order), &p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn opm_single_sequence_is_outer_product() {
        let cfg = small(1, 3);
        let (mut p, m, _) = setup(&cfg, 9);
        let hp = cfg.hidden_proj;
        // Force a == b == 1 and route the flattened product straight through.
        p.set("opm.a.w", Tensor::zeros(&[8, hp])).unwrap();
        p.set("opm.b.w", Tensor::zeros(&[8, hp])).unwrap();
        p.set("opm.a.b", Tensor::ones(&[hp])).unwrap();
        p.set("opm.b.b", Tensor::ones(&[hp])).unwrap();
        let mut w = vec![0.0; hp * hp * 4];
        for c in 0..4 {
            w[c * 4 + c] = 1.0;
        }
        p.set("opm.out.w", Tensor::from_vec(&[hp * hp, 4], w).unwrap()).unwrap();
        p.set("opm.out.b", Tensor::zeros(&[4])).unwrap();
        let o = outer_product_mean(&m, &p).unwrap();
        assert!(o.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn outgoing_transposes_to_incoming() {
        let cfg = small(2, 5);
        let (mut p, _, z) = setup(&cfg, 10);
        // Incoming with a/b roles swapped is outgoing under i <-> j.
        let map = [("a_gate", "b_gate"), ("b_gate", "a_gate"), ("a_proj", "b_proj"), ("b_proj", "a_proj")];
        for suffix in ["ln_in.gamma", "ln_in.beta", "gate.w", "gate.b", "ln_out.gamma", "ln_out.beta", "out.w", "out.b"]
        {
            let v = p.get(&format!("tri_out.{suffix}")).unwrap().clone();
            p.set(&format!("tri_in.{suffix}"), v).unwrap();
        }
        for (from, to) in map {
            for s in ["w", "b"] {
                let v = p.get(&format!("tri_out.{from}.{s}")).unwrap().clone();
                p.set(&format!("tri_in.{to}.{s}"), v).unwrap();
            }
        }
        let zt = tensor::permute(&z, &[1, 0, 2]).unwrap();
        let a = tensor::permute(&tri_update_outgoing(&z, &p).unwrap(), &[1, 0, 2]).unwrap();
        let b = tri_update_incoming(&zt, &p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn block_is_the_composition_of_its_parts() {
        let cfg = small(4, 6);
        let (p, m, z) = setup(&cfg, 23);
        let m1 = tensor::add(&m, &msa_row_attention(&m, &z, &p).unwrap()).unwrap();
        let m2 = tensor::add(&m1, &msa_col_attention(&m1, &p).unwrap()).unwrap();
        let m3 = tensor::add(&m2, &transition(&m2, &p, "msa_transition").unwrap()).unwrap();
        let z1 = tensor::add(&z, &outer_product_mean(&m3, &p).unwrap()).unwrap();
        let z2 = tensor::add(&z1, &tri_update_outgoing(&z1, &p).unwrap()).unwrap();
        let z3 = tensor::add(&z2, &tri_update_incoming(&z2, &p).unwrap()).unwrap();
        let z4 = tensor::add(&z3, &pair_attention_row(&z3, &p).unwrap()).unwrap();
        let z5 = tensor::add(&z4, &pair_attention_col(&z4, &p).unwrap()).unwrap();
        let z6 = tensor::add(&z5, &transition(&z5, &p, "pair_transition").unwrap()).unwrap();
        let (mo, zo) = evoformer_block(&m, &z, &p).unwrap();
        assert!(mo.bit_eq(&m3));
        assert!(zo.bit_eq(&z6));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = small(2, 3);
        let (p, m, _) = setup(&cfg, 11);
        let z_bad = Tensor::zeros(&[4, 4, 4]);
        assert!(evoformer_block(&m, &z_bad, &p).is_err());
        assert!(msa_col_attention(&z_bad, &p).is_err());
    }
}
