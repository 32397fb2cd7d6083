//! Per-device communication volume of one block, forward plus backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_SCHEMA: &str = "evoshard.volume_report/v1";

/// Optional per-row activation sizes; unset rows use the model's `k_bytes`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RowK {
    pub attention_ff: Option<f64>,
    pub outer_product_mean: Option<f64>,
    pub triangle_update: Option<f64>,
    pub transpose: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    /// Intermediate activation size in bytes.
    pub k_bytes: f64,
    pub n_devices: usize,
    /// Tensor parallelism splits heads, so it cannot use more devices than this.
    pub n_heads: usize,
    pub element_size: u64,
    #[serde(default)]
    pub row_k: RowK,
}

impl CommModel {
    pub fn new(k_bytes: f64, n_devices: usize, n_heads: usize) -> Result<CommModel> {
        let m = CommModel { k_bytes, n_devices, n_heads, element_size: 2, row_k: RowK::default() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let ks = [
            Some(self.k_bytes),
            self.row_k.attention_ff,
            self.row_k.outer_product_mean,
            self.row_k.triangle_update,
            self.row_k.transpose,
        ];
        if ks.iter().flatten().any(|k| !k.is_finite() || *k <= 0.0) {
            return Err(Error::Config("activation sizes must be positive and finite".into()));
        }
        if self.n_devices == 0 || self.n_heads == 0 {
            return Err(Error::Config("device and head counts must be at least 1".into()));
        }
        Ok(())
    }

    fn k(&self, row: Option<f64>) -> f64 {
        row.unwrap_or(self.k_bytes)
    }

    /// `(N-1)/N`.
    fn gather_factor(&self) -> f64 {
        let n = self.n_devices as f64;
        (n - 1.0) / n
    }

    /// `(N-1)/N^2`.
    fn transpose_factor(&self) -> f64 {
        self.gather_factor() / self.n_devices as f64
    }
}

/// Twelve ring all-reduces (forward and backward) of `2K(N-1)/N` each.
pub fn tp_volume(m: &CommModel) -> Result<f64> {
    m.validate()?;
    if m.n_devices > m.n_heads {
        return Err(Error::TpScaling { devices: m.n_devices, heads: m.n_heads });
    }
    Ok(24.0 * m.k(m.row_k.attention_ff) * m.gather_factor())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DapBreakdown {
    pub attention_ff: f64,
    pub outer_product_mean: f64,
    pub triangle_update: f64,
    pub transpose: f64,
}

impl DapBreakdown {
    pub fn total(&self) -> f64 {
        self.attention_ff + self.outer_product_mean + self.triangle_update + self.transpose
    }
}

/// `K(N-1)/N + 2K(N-1)/N + 12K(N-1)/N^2`; attention and feed-forward are local.
pub fn dap_volume(m: &CommModel) -> Result<DapBreakdown> {
    m.validate()?;
    Ok(DapBreakdown {
        attention_ff: 0.0,
        outer_product_mean: m.k(m.row_k.outer_product_mean) * m.gather_factor(),
        triangle_update: 2.0 * m.k(m.row_k.triangle_update) * m.gather_factor(),
        transpose: 12.0 * m.k(m.row_k.transpose) * m.transpose_factor(),
    })
}

/// Forward half of the DAP volume, comparable with a simulator ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardVolume {
    /// Six all-to-alls: `6K(N-1)/N^2`.
    pub transposes: f64,
    /// Three all-gathers: `3K(N-1)/N`.
    pub gathers: f64,
}

pub fn dap_forward_volume(m: &CommModel) -> Result<ForwardVolume> {
    m.validate()?;
    Ok(ForwardVolume {
        transposes: 6.0 * m.k(m.row_k.transpose) * m.transpose_factor(),
        gathers: (m.k(m.row_k.outer_product_mean) + 2.0 * m.k(m.row_k.triangle_update)) * m.gather_factor(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub schema: String,
    pub model: CommModel,
    /// `None` when tensor parallelism cannot use this many devices.
    pub tp_total: Option<f64>,
    pub tp_error: Option<String>,
    pub dap: DapBreakdown,
    pub dap_total: f64,
    /// `tp_total / dap_total`; `None` at one device or without a TP total.
    pub ratio: Option<f64>,
}

pub fn compare(m: &CommModel) -> Result<VolumeReport> {
    let dap = dap_volume(m)?;
    let (tp_total, tp_error) = match tp_volume(m) {
        Ok(v) => (Some(v), None),
        Err(e @ Error::TpScaling { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let dap_total = dap.total();
    let ratio = tp_total.filter(|_| dap_total > 0.0).map(|t| t / dap_total);
    Ok(VolumeReport { schema: VOLUME_SCHEMA.into(), model: *m, tp_total, tp_error, dap, dap_total, ratio })
}

/// Bytes of the pair attention logits `[N_r, H, N_r, N_r]` summed over layers.
pub fn activation_memory(n_res: u64, n_head: u64, layers: u64, element_size: u64) -> u64 {
    n_res.pow(3) * n_head * element_size * layers
}
