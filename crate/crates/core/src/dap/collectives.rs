//! Collectives over simulated devices with byte ledgering.

use super::{check_divisible, concat_axis, Collective, CommLedger, DeviceMesh, ShardedTensor};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

fn numel(t: &Tensor) -> u64 {
    t.numel() as u64
}

/// Reshards from `shard_axis` to `new_axis`.
///
/// Device `i` cuts its block into `N` pieces along `new_axis` and sends piece
/// `j` to device `j`, so it sends `(N-1)/N` of its block: `K(N-1)/N^2`.
pub fn all_to_all_switch_axis(st: &ShardedTensor, new_axis: usize, ledger: &mut CommLedger) -> Result<ShardedTensor> {
    let n = st.shards.len();
    let rank = st.global_shape.len();
    if new_axis >= rank || new_axis == st.shard_axis {
        return Err(Error::Shard(format!("cannot switch shard axis {} to {new_axis}", st.shard_axis)));
    }
    st.check_divisible("all_to_all")?;
    check_divisible(&st.global_shape, new_axis, n, "all_to_all")?;
    let blocks = st.mesh().blocks(st.global_shape[new_axis]);
    // pieces[i][j]: the part of device i's block destined for device j.
    let pieces: Vec<Vec<Tensor>> = st
        .shards
        .iter()
        .map(|s| blocks.iter().map(|&(lo, hi)| tensor::slice_axis(s, new_axis, lo, hi)).collect())
        .collect::<Result<_>>()?;
    let sent: Vec<u64> = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| numel(&pieces[i][j])).sum()).collect();
    ledger.record(Collective::AllToAll, &sent);
    let shards = (0..n)
        .map(|j| {
            let parts: Vec<Tensor> = (0..n).map(|i| pieces[i][j].clone()).collect();
            let mut shape = st.global_shape.clone();
            shape[new_axis] = blocks[j].1 - blocks[j].0;
            concat_axis(&parts, st.shard_axis, &shape)
        })
        .collect::<Result<_>>()?;
    Ok(ShardedTensor { global_shape: st.global_shape.clone(), shard_axis: new_axis, shards })
}

/// Ring all-gather: every device ends with the full tensor.
///
/// In step `t` device `i` forwards block `(i - t) mod N`, so each device
/// sends every block but the one it receives last: `K(N-1)/N` when even.
pub fn all_gather(st: &ShardedTensor, ledger: &mut CommLedger) -> Result<Tensor> {
    all_gather_as(st, ledger, Collective::AllGather)
}

pub(crate) fn all_gather_as(st: &ShardedTensor, ledger: &mut CommLedger, kind: Collective) -> Result<Tensor> {
    let n = st.shards.len();
    let mut sent = vec![0u64; n];
    for t in 0..n.saturating_sub(1) {
        for (i, s) in sent.iter_mut().enumerate() {
            *s += numel(&st.shards[(i + n - t) % n]);
        }
    }
    ledger.record(kind, &sent);
    concat_axis(&st.shards, st.shard_axis, &st.global_shape)
}

/// Ring all-reduce (reduce-scatter then all-gather) of equally shaped parts.
///
/// Each phase moves `N-1` of the `N` flat chunks per device, so a device
/// sends `2K(N-1)/N` in total when the element count divides evenly.
pub fn ring_all_reduce(parts: &[Tensor], ledger: &mut CommLedger) -> Result<Tensor> {
    let n = parts.len();
    if n != ledger.n_devices() || n == 0 {
        return Err(Error::Mesh(format!("{n} parts for a {}-device ledger", ledger.n_devices())));
    }
    let shape = parts[0].shape().to_vec();
    if let Some(p) = parts.iter().find(|p| p.shape() != shape.as_slice()) {
        return Err(Error::Shard(format!("all_reduce parts differ in shape: {:?} vs {shape:?}", p.shape())));
    }
    let chunks = DeviceMesh { n_devices: n }.blocks(parts[0].numel());
    let mut bufs: Vec<Vec<f64>> = parts.iter().map(|p| p.to_vec()).collect();
    let mut sent = vec![0u64; n];
    // Reduce-scatter: after step t, device i+1 holds t+2 contributions to chunk (i - t).
    for t in 0..n - 1 {
        let msgs: Vec<(usize, Vec<f64>)> = (0..n)
            .map(|i| {
                let c = (i + n - t) % n;
                let (lo, hi) = chunks[c];
                (c, bufs[i][lo..hi].to_vec())
            })
            .collect();
        for (i, (c, data)) in msgs.into_iter().enumerate() {
            let dst = (i + 1) % n;
            let (lo, _) = chunks[c];
            for (k, v) in data.iter().enumerate() {
                bufs[dst][lo + k] += v;
            }
            sent[i] += data.len() as u64;
        }
    }
    // All-gather: device i owns the reduced chunk (i + 1) mod N.
    for t in 0..n - 1 {
        let msgs: Vec<(usize, Vec<f64>)> = (0..n)
            .map(|i| {
                let c = (i + 1 + n - t) % n;
                let (lo, hi) = chunks[c];
                (c, bufs[i][lo..hi].to_vec())
            })
            .collect();
        for (i, (c, data)) in msgs.into_iter().enumerate() {
            let dst = (i + 1) % n;
            let (lo, hi) = chunks[c];
            bufs[dst][lo..hi].copy_from_slice(&data);
            sent[i] += data.len() as u64;
        }
    }
    ledger.record(Collective::AllReduce, &sent);
    debug_assert!(bufs.iter().all(|b| b == &bufs[0]));
    Tensor::from_vec(&shape, bufs.swap_remove(0))
}
