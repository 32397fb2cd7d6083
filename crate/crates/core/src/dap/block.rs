//! The evoformer block under dynamic axial parallelism.
//!
//! `m` enters sharded along sequences and `z` along rows; both leave the same
//! way. Per block, in order:
//!
//! | step | collective | payload |
//! |------|------------|---------|
//! | MSA row attention | bias gather | pair bias heads `[R, R, H]` along rows |
//! | before MSA column attention | all-to-all | `m`: sequences to residues |
//! | outer product mean | all-gather | right projection `[S, R, P]` along residues |
//! | after outer product mean | all-to-all | `m`: residues to sequences |
//! | outgoing triangle update | all-gather | right projection along rows |
//! | before incoming triangle update | all-to-all | `z`: rows to columns |
//! | incoming triangle update | all-gather | left projection along columns |
//! | before pair row attention | all-to-all | `z`: columns to rows |
//! | before pair column attention | all-to-all | `z`: rows to columns |
//! | end of block | all-to-all | `z`: columns to rows |
//!
//! That is six all-to-alls and three all-gathers plus the bias gather.

use std::collections::BTreeMap;
use std::thread;

use super::collectives::all_gather_as;
use super::{all_to_all_switch_axis, check_divisible, Collective, CommLedger, DeviceMesh, ShardedTensor, Traffic};
use crate::error::{Error, Result};
use crate::evoformer::{
    gated_attention, msa_col_attention_with, opm_finish, opm_projections, pair_attention_col_with,
    pair_attention_row_with, pair_bias_raw, transition_with, tri_finish_incoming, tri_finish_outgoing, tri_projections,
    AttnBias, Backend, BlockParams, Eager, EvoConfig,
};
use crate::tensor::Tensor;

/// How per-device compute phases are run between collectives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceOrder {
    /// One device after another in the given permutation.
    Sequential(Vec<usize>),
    /// One scoped thread per device.
    Concurrent,
}

impl DeviceOrder {
    pub fn natural(n: usize) -> DeviceOrder {
        DeviceOrder::Sequential((0..n).collect())
    }
}

#[derive(Debug, Clone)]
pub struct DapOutput {
    pub m: ShardedTensor,
    pub z: ShardedTensor,
    pub ledger: CommLedger,
}

fn per_device<T, F>(order: &DeviceOrder, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    match order {
        DeviceOrder::Sequential(perm) => {
            let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
            for &d in perm {
                out[d] = Some(f(d)?);
            }
            Ok(out.into_iter().map(|o| o.expect("order is a permutation")).collect())
        }
        DeviceOrder::Concurrent => thread::scope(|s| {
            let f = &f;
            let handles: Vec<_> = (0..n).map(|d| s.spawn(move || f(d))).collect();
            handles.into_iter().map(|h| h.join().expect("device worker panicked")).collect()
        }),
    }
}

fn assemble(shards: Vec<Tensor>, axis: usize) -> ShardedTensor {
    let mut global_shape = shards[0].shape().to_vec();
    global_shape[axis] = shards.iter().map(|s| s.shape()[axis]).sum();
    ShardedTensor { global_shape, shard_axis: axis, shards }
}

/// [`dap_evoformer_block_with`] in natural device order.
pub fn dap_evoformer_block(
    m: &ShardedTensor,
    z: &ShardedTensor,
    p: &BlockParams,
    mesh: &DeviceMesh,
) -> Result<DapOutput> {
    dap_evoformer_block_with(m, z, p, mesh, &DeviceOrder::natural(mesh.n_devices))
}

/// Runs one block on `mesh`. `m` must be sharded along axis 0 (sequences)
/// and `z` along axis 0 (rows), with every split extent divisible by `N`.
pub fn dap_evoformer_block_with(
    m: &ShardedTensor,
    z: &ShardedTensor,
    p: &BlockParams,
    mesh: &DeviceMesh,
    order: &DeviceOrder,
) -> Result<DapOutput> {
    let n = mesh.n_devices;
    let cfg = &p.config;
    cfg.check_inputs(&m.global_shape, &z.global_shape)?;
    if m.shards.len() != n || z.shards.len() != n {
        return Err(Error::Mesh(format!(
            "shards for {} and {} devices on a {n}-device mesh",
            m.shards.len(),
            z.shards.len()
        )));
    }
    if m.shard_axis != 0 || z.shard_axis != 0 {
        return Err(Error::Shard("m and z must enter sharded along axis 0".into()));
    }
    if let DeviceOrder::Sequential(perm) = order {
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&d| d >= n || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::Mesh(format!("device order {perm:?} is not a permutation of 0..{n}")));
        }
    }
    check_divisible(&m.global_shape, 0, n, "msa sequences")?;
    check_divisible(&m.global_shape, 1, n, "msa residues")?;
    check_divisible(&z.global_shape, 0, n, "pair rows")?;
    check_divisible(&z.global_shape, 1, n, "pair columns")?;

    let mut ledger = CommLedger::new(mesh);
    let run = |f: &(dyn Fn(&mut Eager<'_>, usize) -> Result<Tensor> + Sync)| {
        per_device(order, n, |d| f(&mut Eager::new(p), d))
    };
    let residual = |x: &ShardedTensor, upd: Vec<Tensor>| -> Result<ShardedTensor> {
        let shards = per_device(order, n, |d| Eager::new(p).add(&x.shards[d], &upd[d]))?;
        Ok(ShardedTensor { shards, ..x.clone() })
    };

    // MSA row attention; the bias needs every pair row.
    let bias = run(&|e, d| pair_bias_raw(e, &z.shards[d], "msa_row"))?;
    let bias = all_gather_as(&assemble(bias, 0), &mut ledger, Collective::BiasGather)?;
    let upd = run(&|e, d| gated_attention(e, &m.shards[d], AttnBias::Pair(bias.clone()), "msa_row", cfg.n_head_msa))?;
    let m1 = residual(m, upd)?;

    // MSA column attention and transition on residue shards.
    let m1 = all_to_all_switch_axis(&m1, 1, &mut ledger)?;
    let upd = run(&|e, d| msa_col_attention_with(e, &m1.shards[d], cfg.n_head_msa))?;
    let m2 = residual(&m1, upd)?;
    let upd = run(&|e, d| transition_with(e, &m2.shards[d], "msa_transition"))?;
    let m3 = residual(&m2, upd)?;

    // Outer product mean: local left rows against the gathered right projection.
    let proj = per_device(order, n, |d| opm_projections(&mut Eager::new(p), &m3.shards[d]))?;
    let (left, right): (Vec<Tensor>, Vec<Tensor>) = proj.into_iter().unzip();
    let right = all_gather_as(&assemble(right, 1), &mut ledger, Collective::AllGather)?;
    let upd = run(&|e, d| opm_finish(e, &left[d], &right))?;
    let z1 = residual(z, upd)?;
    let m_out = all_to_all_switch_axis(&m3, 0, &mut ledger)?;

    // Outgoing triangle update on row shards.
    let proj = per_device(order, n, |d| tri_projections(&mut Eager::new(p), &z1.shards[d], "tri_out"))?;
    let (gates, a, b) = unzip3(proj);
    let b = all_gather_as(&assemble(b, 0), &mut ledger, Collective::AllGather)?;
    let upd = run(&|e, d| tri_finish_outgoing(e, &gates[d], &a[d], &b))?;
    let z2 = residual(&z1, upd)?;

    // Incoming triangle update on column shards.
    let z2 = all_to_all_switch_axis(&z2, 1, &mut ledger)?;
    let proj = per_device(order, n, |d| tri_projections(&mut Eager::new(p), &z2.shards[d], "tri_in"))?;
    let (gates, a, b) = unzip3(proj);
    let a = all_gather_as(&assemble(a, 1), &mut ledger, Collective::AllGather)?;
    let upd = run(&|e, d| tri_finish_incoming(e, &gates[d], &a, &b[d]))?;
    let z3 = residual(&z2, upd)?;

    // Pair row attention on row shards.
    let z3 = all_to_all_switch_axis(&z3, 0, &mut ledger)?;
    let upd = run(&|e, d| pair_attention_row_with(e, &z3.shards[d], cfg.n_head_pair))?;
    let z4 = residual(&z3, upd)?;

    // Pair column attention and transition on column shards.
    let z4 = all_to_all_switch_axis(&z4, 1, &mut ledger)?;
    let upd = run(&|e, d| pair_attention_col_with(e, &z4.shards[d], cfg.n_head_pair))?;
    let z5 = residual(&z4, upd)?;
    let upd = run(&|e, d| transition_with(e, &z5.shards[d], "pair_transition"))?;
    let z6 = residual(&z5, upd)?;
    let z_out = all_to_all_switch_axis(&z6, 0, &mut ledger)?;

    Ok(DapOutput { m: m_out, z: z_out, ledger })
}

fn unzip3(v: Vec<(Tensor, Tensor, Tensor)>) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for (a, b, c) in v {
        out.0.push(a);
        out.1.push(b);
        out.2.push(c);
    }
    out
}

/// Per-device traffic one forward block sends on an `N`-device mesh, from
/// the collective placement above. Every device sends the same amount.
pub fn predicted_forward_traffic(
    cfg: &EvoConfig,
    mesh: &DeviceMesh,
    element_size: u64,
) -> Result<BTreeMap<Collective, Traffic>> {
    cfg.validate()?;
    let n = mesh.n_devices as u64;
    check_divisible(&cfg.msa_shape(), 0, mesh.n_devices, "msa sequences")?;
    check_divisible(&cfg.msa_shape(), 1, mesh.n_devices, "msa residues")?;
    check_divisible(&cfg.pair_shape(), 0, mesh.n_devices, "pair rows")?;
    let (s, r) = (cfg.n_seq as u64, cfg.n_res as u64);
    let k_m = s * r * cfg.h_msa as u64 * element_size;
    let k_z = r * r * cfg.h_pair as u64 * element_size;
    let k_opm = s * r * cfg.hidden_proj as u64 * element_size;
    let k_bias = r * r * cfg.n_head_msa as u64 * element_size;
    let k_tri = r * r * cfg.hidden_proj as u64 * element_size;
    let mut out: BTreeMap<Collective, Traffic> = Collective::ALL.iter().map(|&c| (c, Traffic::default())).collect();
    if n > 1 {
        let a2a = (2 * k_m + 4 * k_z) * (n - 1) / (n * n);
        let ag = (k_opm + 2 * k_tri) * (n - 1) / n;
        out.insert(Collective::AllToAll, Traffic { count: 6, bytes: a2a });
        out.insert(Collective::AllGather, Traffic { count: 3, bytes: ag });
        out.insert(Collective::BiasGather, Traffic { count: 1, bytes: k_bias * (n - 1) / n });
    }
    Ok(out)
}
