//! Dynamic axial parallelism on simulated devices.
//!
//! Devices are slots of one process. Activations are split into contiguous
//! blocks along one axis, parameters are replicated, and collectives move
//! blocks between slots while a [`CommLedger`] records the bytes each device
//! would send under ring (gather, reduce) or pairwise (all-to-all) exchange.

mod block;
mod collectives;

pub use block::{dap_evoformer_block, dap_evoformer_block_with, predicted_forward_traffic, DapOutput, DeviceOrder};
pub use collectives::{all_gather, all_to_all_switch_axis, ring_all_reduce};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, BF16_ELEMENT_SIZE};

pub const LEDGER_SCHEMA: &str = "evoshard.comm_ledger/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMesh {
    pub n_devices: usize,
}

impl DeviceMesh {
    pub fn new(n_devices: usize) -> Result<DeviceMesh> {
        if n_devices == 0 {
            return Err(Error::Mesh("a mesh needs at least one device".into()));
        }
        Ok(DeviceMesh { n_devices })
    }

    /// Block boundaries of `extent` split over the mesh: sizes differ by at
    /// most one, larger blocks first.
    pub fn blocks(&self, extent: usize) -> Vec<(usize, usize)> {
        let n = self.n_devices;
        let (base, extra) = (extent / n, extent % n);
        let mut lo = 0;
        (0..n)
            .map(|d| {
                let hi = lo + base + usize::from(d < extra);
                let r = (lo, hi);
                lo = hi;
                r
            })
            .collect()
    }
}

/// A tensor split into per-device contiguous blocks along `shard_axis`.
#[derive(Debug, Clone)]
pub struct ShardedTensor {
    pub global_shape: Vec<usize>,
    pub shard_axis: usize,
    pub shards: Vec<Tensor>,
}

impl ShardedTensor {
    pub fn mesh(&self) -> DeviceMesh {
        DeviceMesh { n_devices: self.shards.len() }
    }

    /// Requires the shard axis extent to divide evenly.
    pub(crate) fn check_divisible(&self, what: &str) -> Result<()> {
        check_divisible(&self.global_shape, self.shard_axis, self.shards.len(), what)
    }
}

pub(crate) fn check_divisible(shape: &[usize], axis: usize, n: usize, what: &str) -> Result<()> {
    let e = shape[axis];
    if e < n {
        return Err(Error::Mesh(format!("{what}: {n} devices exceed extent {e} of axis {axis}")));
    }
    if !e.is_multiple_of(n) {
        return Err(Error::Shard(format!("{what}: extent {e} of axis {axis} is not divisible by {n}")));
    }
    Ok(())
}

/// Splits `t` into contiguous blocks along `axis`.
pub fn shard(t: &Tensor, axis: usize, mesh: &DeviceMesh) -> Result<ShardedTensor> {
    if axis >= t.rank() {
        return Err(Error::Shard(format!("axis {axis} out of range for rank {}", t.rank())));
    }
    let e = t.shape()[axis];
    if e < mesh.n_devices {
        return Err(Error::Mesh(format!("{} devices exceed extent {e} of axis {axis}", mesh.n_devices)));
    }
    let shards =
        mesh.blocks(e).into_iter().map(|(lo, hi)| tensor::slice_axis(t, axis, lo, hi)).collect::<Result<_>>()?;
    Ok(ShardedTensor { global_shape: t.shape().to_vec(), shard_axis: axis, shards })
}

/// Concatenates blocks along `axis` into one tensor of `shape`.
pub(crate) fn concat_axis(parts: &[Tensor], axis: usize, shape: &[usize]) -> Result<Tensor> {
    let mut out = Tensor::zeros(shape);
    let mut lo = 0;
    for p in parts {
        tensor::write_slice(&mut out, axis, lo, p)?;
        lo += p.shape()[axis];
    }
    if lo != shape[axis] {
        return Err(Error::Shard(format!("blocks cover {lo} of {} along axis {axis}", shape[axis])));
    }
    Ok(out)
}

pub fn unshard(st: &ShardedTensor) -> Result<Tensor> {
    concat_axis(&st.shards, st.shard_axis, &st.global_shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collective {
    #[serde(rename = "alltoall")]
    AllToAll,
    #[serde(rename = "allgather")]
    AllGather,
    #[serde(rename = "allreduce")]
    AllReduce,
    /// Gather of the pair-derived attention bias; kept apart from the
    /// collectives the analytic model counts.
    BiasGather,
}

impl Collective {
    pub const ALL: [Collective; 4] =
        [Collective::AllToAll, Collective::AllGather, Collective::AllReduce, Collective::BiasGather];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub count: u64,
    pub bytes: u64,
}

impl std::ops::AddAssign for Traffic {
    fn add_assign(&mut self, o: Traffic) {
        self.count += o.count;
        self.bytes += o.bytes;
    }
}

/// Per-device sent bytes and collective counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub element_size: u64,
    pub per_device: Vec<BTreeMap<Collective, Traffic>>,
}

impl CommLedger {
    pub fn new(mesh: &DeviceMesh) -> CommLedger {
        CommLedger::with_element_size(mesh, BF16_ELEMENT_SIZE)
    }

    pub fn with_element_size(mesh: &DeviceMesh, element_size: u64) -> CommLedger {
        let zero: BTreeMap<Collective, Traffic> = Collective::ALL.iter().map(|&c| (c, Traffic::default())).collect();
        CommLedger { element_size, per_device: vec![zero; mesh.n_devices] }
    }

    pub fn n_devices(&self) -> usize {
        self.per_device.len()
    }

    /// Records one collective call with per-device sent element counts. A
    /// single device never communicates, so nothing is recorded.
    pub(crate) fn record(&mut self, kind: Collective, sent_elems: &[u64]) {
        if self.per_device.len() < 2 {
            return;
        }
        for (dev, &e) in self.per_device.iter_mut().zip(sent_elems) {
            *dev.get_mut(&kind).expect("all kinds present") += Traffic { count: 1, bytes: e * self.element_size };
        }
    }

    pub fn device(&self, d: usize, kind: Collective) -> Traffic {
        self.per_device[d][&kind]
    }

    /// Sum over devices.
    pub fn total(&self, kind: Collective) -> Traffic {
        let mut t = Traffic::default();
        for dev in &self.per_device {
            t += dev[&kind];
        }
        t
    }

    /// Collective calls of one kind (every device takes part in each call).
    pub fn calls(&self, kind: Collective) -> u64 {
        self.per_device.first().map_or(0, |d| d[&kind].count)
    }

    pub fn is_zero_bytes(&self) -> bool {
        self.per_device.iter().all(|d| d.values().all(|t| t.bytes == 0))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'static str,
            element_size: u64,
            per_device: &'a [BTreeMap<Collective, Traffic>],
            totals: BTreeMap<Collective, Traffic>,
        }
        let totals = Collective::ALL.iter().map(|&c| (c, self.total(c))).collect();
        Ok(serde_json::to_string_pretty(&Doc {
            schema: LEDGER_SCHEMA,
            element_size: self.element_size,
            per_device: &self.per_device,
            totals,
        })?)
    }
}
