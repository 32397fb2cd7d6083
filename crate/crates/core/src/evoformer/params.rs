//! Block configuration and parameter sets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{untracked, Tensor};

/// Dimensions of one evoformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvoConfig {
    pub n_seq: usize,
    pub n_res: usize,
    pub h_msa: usize,
    pub h_pair: usize,
    pub n_head_msa: usize,
    pub n_head_pair: usize,
    /// Projection width of the outer product mean and triangular updates.
    pub hidden_proj: usize,
    pub transition_factor: usize,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            n_seq: 8,
            n_res: 16,
            h_msa: 8,
            h_pair: 4,
            n_head_msa: 2,
            n_head_pair: 2,
            hidden_proj: 4,
            transition_factor: 4,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_seq", self.n_seq),
            ("n_res", self.n_res),
            ("h_msa", self.h_msa),
            ("h_pair", self.h_pair),
            ("n_head_msa", self.n_head_msa),
            ("n_head_pair", self.n_head_pair),
            ("hidden_proj", self.hidden_proj),
            ("transition_factor", self.transition_factor),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.h_msa.is_multiple_of(self.n_head_msa) {
            return Err(Error::Config(format!(
                "h_msa {} is not divisible by n_head_msa {}",
                self.h_msa, self.n_head_msa
            )));
        }
        if !self.h_pair.is_multiple_of(self.n_head_pair) {
            return Err(Error::Config(format!(
                "h_pair {} is not divisible by n_head_pair {}",
                self.h_pair, self.n_head_pair
            )));
        }
        Ok(())
    }

    /// Per-head channels in the MSA stack.
    pub fn c_msa(&self) -> usize {
        self.h_msa / self.n_head_msa
    }

    /// Per-head channels in the pair stack.
    pub fn c_pair(&self) -> usize {
        self.h_pair / self.n_head_pair
    }

    pub fn msa_shape(&self) -> [usize; 3] {
        [self.n_seq, self.n_res, self.h_msa]
    }

    pub fn pair_shape(&self) -> [usize; 3] {
        [self.n_res, self.n_res, self.h_pair]
    }

    pub fn check_inputs(&self, m: &[usize], z: &[usize]) -> Result<()> {
        if m != self.msa_shape() || z != self.pair_shape() {
            return Err(Error::Config(format!(
                "inputs {m:?}/{z:?} do not match config shapes {:?}/{:?}",
                self.msa_shape(),
                self.pair_shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

fn ln(specs: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, c: usize) {
    specs.push((format!("{prefix}.gamma"), vec![c], ParamKind::Gamma));
    specs.push((format!("{prefix}.beta"), vec![c], ParamKind::Beta));
}

fn dense(specs: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, i: usize, o: usize, bias: bool) {
    specs.push((format!("{prefix}.w"), vec![i, o], ParamKind::Weight { fan_in: i }));
    if bias {
        specs.push((format!("{prefix}.b"), vec![o], ParamKind::Bias));
    }
}

fn attention(
    specs: &mut Vec<(String, Vec<usize>, ParamKind)>,
    p: &str,
    c_in: usize,
    heads: usize,
    bias_from: Option<usize>,
) {
    ln(specs, &format!("{p}.ln"), c_in);
    if let Some(cz) = bias_from {
        if cz != c_in {
            ln(specs, &format!("{p}.ln_z"), cz);
        }
        dense(specs, &format!("{p}.bias"), cz, heads, false);
    }
    for n in ["q", "k", "v"] {
        dense(specs, &format!("{p}.{n}"), c_in, c_in, false);
    }
    dense(specs, &format!("{p}.gate"), c_in, c_in, true);
    dense(specs, &format!("{p}.out"), c_in, c_in, true);
}

fn transition(specs: &mut Vec<(String, Vec<usize>, ParamKind)>, p: &str, c: usize, factor: usize) {
    ln(specs, &format!("{p}.ln"), c);
    dense(specs, &format!("{p}.lin1"), c, c * factor, true);
    dense(specs, &format!("{p}.lin2"), c * factor, c, true);
}

fn triangle(specs: &mut Vec<(String, Vec<usize>, ParamKind)>, p: &str, cz: usize, hp: usize) {
    ln(specs, &format!("{p}.ln_in"), cz);
    dense(specs, &format!("{p}.gate"), cz, cz, true);
    for n in ["a_gate", "a_proj", "b_gate", "b_proj"] {
        dense(specs, &format!("{p}.{n}"), cz, hp, true);
    }
    ln(specs, &format!("{p}.ln_out"), hp);
    dense(specs, &format!("{p}.out"), hp, cz, true);
}

/// Every parameter of a block with its shape, in generation order.
pub(crate) fn param_specs(cfg: &EvoConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let (hm, hz, hp) = (cfg.h_msa, cfg.h_pair, cfg.hidden_proj);
    let mut s = Vec::new();
    // The MSA row attention bias reads the pair representation; it gets its
    // own layer norm over the pair channels.
    ln(&mut s, "msa_row.ln", hm);
    ln(&mut s, "msa_row.ln_z", hz);
    dense(&mut s, "msa_row.bias", hz, cfg.n_head_msa, false);
    for n in ["q", "k", "v"] {
        dense(&mut s, &format!("msa_row.{n}"), hm, hm, false);
    }
    dense(&mut s, "msa_row.gate", hm, hm, true);
    dense(&mut s, "msa_row.out", hm, hm, true);

    attention(&mut s, "msa_col", hm, cfg.n_head_msa, None);
    transition(&mut s, "msa_transition", hm, cfg.transition_factor);

    ln(&mut s, "opm.ln", hm);
    dense(&mut s, "opm.a", hm, hp, true);
    dense(&mut s, "opm.b", hm, hp, true);
    dense(&mut s, "opm.out", hp * hp, hz, true);

    triangle(&mut s, "tri_out", hz, hp);
    triangle(&mut s, "tri_in", hz, hp);
    attention(&mut s, "pair_row", hz, cfg.n_head_pair, Some(hz));
    attention(&mut s, "pair_col", hz, cfg.n_head_pair, Some(hz));
    transition(&mut s, "pair_transition", hz, cfg.transition_factor);
    s
}

/// All weights of one block, keyed by `<sub-module>.<layer>.<w|b|gamma|beta>`.
///
/// Parameter buffers are not charged to the allocation tracker: they are
/// resident state, not activations.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub config: EvoConfig,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorDump {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDump {
    schema: String,
    config: EvoConfig,
    tensors: BTreeMap<String, TensorDump>,
}

pub const PARAMS_SCHEMA: &str = "evoshard.params/v1";

impl BlockParams {
    /// Seeded random initialization.
    pub fn random(cfg: &EvoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = untracked(|| {
            param_specs(cfg)
                .into_iter()
                .map(|(name, shape, kind)| {
                    let t = match kind {
                        ParamKind::Weight { fan_in } => {
                            Tensor::rand_uniform_with(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                        }
                        ParamKind::Bias | ParamKind::Beta => Tensor::rand_uniform_with(&shape, 0.1, &mut rng),
                        ParamKind::Gamma => {
                            let d = (0..shape[0]).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect();
                            Tensor::from_parts(shape.clone(), d)
                        }
                    };
                    (name, t)
                })
                .collect()
        });
        Ok(BlockParams { config: *cfg, tensors })
    }

    /// Every parameter set to zero.
    pub fn zeros(cfg: &EvoConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors =
            untracked(|| param_specs(cfg).into_iter().map(|(name, shape, _)| (name, Tensor::zeros(&shape))).collect());
        Ok(BlockParams { config: *cfg, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Replaces a parameter; the shape must stay the same.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {name} has shape {:?}, got {:?}",
                old.shape(),
                value.shape()
            )));
        }
        let value = untracked(|| Tensor::from_parts(value.shape().to_vec(), value.to_vec()));
        self.tensors.insert(name.to_string(), value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let dump = ParamsDump {
            schema: PARAMS_SCHEMA.into(),
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), TensorDump { shape: t.shape().to_vec(), data: t.to_vec() }))
                .collect(),
        };
        Ok(serde_json::to_string(&dump)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let dump: ParamsDump = serde_json::from_str(s)?;
        if dump.schema != PARAMS_SCHEMA {
            return Err(Error::Parse(format!("unexpected schema {}", dump.schema)));
        }
        dump.config.validate()?;
        let expected = param_specs(&dump.config);
        if expected.len() != dump.tensors.len() {
            return Err(Error::Parse(format!("expected {} parameters, found {}", expected.len(), dump.tensors.len())));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape, _) in expected {
            let d = dump.tensors.get(&name).ok_or_else(|| Error::Parse(format!("missing parameter {name}")))?;
            if d.shape != shape {
                return Err(Error::Parse(format!("parameter {name} has shape {:?}, expected {shape:?}", d.shape)));
            }
            let t = untracked(|| Tensor::from_vec(&d.shape, d.data.clone()))?;
            tensors.insert(name, t);
        }
        Ok(BlockParams { config: dump.config, tensors })
    }
}
