//! Named parameters: declaration, initialization, checkpoints, identity.
//!
//! [`parameter_specs`] is the single source of truth for which tensors a
//! config owns. Initialization draws each parameter from a stream keyed by
//! `(seed, name)`, so two configs that share a name share its starting
//! values; architecture comparisons then differ only where the
//! architectures do. A checkpoint must match its config's spec list
//! exactly, and [`ModelParams::model_id`] fingerprints config plus weights
//! so bitstreams can refuse the wrong decoder.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::ModelConfig;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamInit, Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Declared name, shape, and init rule of one parameter.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

fn push_conv(v: &mut Vec<ParamSpec>, prefix: &str, k: usize, cin: usize, cout: usize) {
    v.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![k, k, cin, cout],
        init: ParamInit::FanIn { fan_in: k * k * cin },
    });
    v.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![cout], init: ParamInit::Const(0.0) });
}

/// 1x1 conv head that emits stacked (gain, offset) channel pairs; its bias
/// starts the gains at 1 and offsets at 0 so modulation begins near
/// identity.
fn push_affine_head(v: &mut Vec<ParamSpec>, prefix: &str, cin: usize, c_each: usize) {
    v.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![1, 1, cin, 2 * c_each],
        init: ParamInit::FanIn { fan_in: cin },
    });
    v.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![2 * c_each],
        init: ParamInit::HalfConst(1.0, 0.0),
    });
}

fn push_linear(v: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize) {
    v.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![din, dout],
        init: ParamInit::FanIn { fan_in: din },
    });
    v.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![dout], init: ParamInit::Const(0.0) });
}

fn push_layernorm(v: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    v.push(ParamSpec { name: format!("{prefix}.g"), shape: vec![d], init: ParamInit::Const(1.0) });
    v.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![d], init: ParamInit::Const(0.0) });
}

/// Channel-gate plus windowed-attention block. `d = c/2` is each branch's
/// width; the gate bottleneck reduces by 4.
fn push_csa(v: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    let d = c / 2;
    let r = (d / 4).max(1);
    push_conv(v, &format!("{prefix}.pre"), 3, c, c);
    push_linear(v, &format!("{prefix}.cwra.r"), d, r);
    push_linear(v, &format!("{prefix}.cwra.e"), r, d);
    push_layernorm(v, &format!("{prefix}.swa.ln1"), d);
    push_linear(v, &format!("{prefix}.swa.qkv"), d, 3 * d);
    push_linear(v, &format!("{prefix}.swa.proj"), d, d);
    push_layernorm(v, &format!("{prefix}.swa.ln2"), d);
    push_linear(v, &format!("{prefix}.swa.mlp1"), d, 2 * d);
    push_linear(v, &format!("{prefix}.swa.mlp2"), 2 * d, d);
    push_conv(v, &format!("{prefix}.post"), 3, c, c);
}

/// Every parameter the forward pass of `config` consumes, in declaration
/// order. Disabled stages contribute nothing, which is what keeps their
/// weights out of ablation checkpoints.
pub fn parameter_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let c = config.base_channels;
    let cy = config.latent_channels;
    let mut v = Vec::new();

    push_conv(&mut v, "enc.stem.head", 3, 4, c);
    if config.coord_gate_active() {
        push_conv(&mut v, "enc.stem.gate", 3, 2, c);
    }
    if config.use_gft {
        push_conv(&mut v, "enc.cpe.g1", 3, 4, c);
        push_conv(&mut v, "enc.cpe.g2", 3, c, c);
        push_conv(&mut v, "enc.cpe.g3", 3, c, c);
        v.push(ParamSpec {
            name: "enc.cpe.g_lin.w".into(),
            shape: vec![c, 2 * c],
            init: ParamInit::FanIn { fan_in: c },
        });
        v.push(ParamSpec {
            name: "enc.cpe.g_lin.b".into(),
            shape: vec![2 * c],
            init: ParamInit::HalfConst(1.0, 0.0),
        });
    }
    if config.use_lft {
        push_conv(&mut v, "enc.cpe.l1", 3, 4, c);
        push_conv(&mut v, "enc.cpe.l2", 3, c, c);
        for s in 1..=config.stages {
            push_conv(&mut v, &format!("enc.cpe.l_down{s}"), 3, c, c);
            push_affine_head(&mut v, &format!("enc.cpe.l_head{s}"), c, c);
        }
    }
    for s in 1..=config.stages {
        push_conv(&mut v, &format!("enc.s{s}.down"), 3, c, c);
        if config.use_csa {
            for b in 1..=config.cimc_blocks {
                push_csa(&mut v, &format!("enc.s{s}.b{b}.csa"), c);
            }
        }
    }
    push_conv(&mut v, "enc.latent", 1, c, cy);

    push_conv(&mut v, "dec.head", 3, cy, c);
    for s in 1..=config.stages {
        push_conv(&mut v, &format!("dec.s{s}.up"), 3, c, 4 * c);
        if config.use_csa {
            push_csa(&mut v, &format!("dec.s{s}.csa"), c);
        }
    }
    push_conv(&mut v, "dec.out", 3, c / 4, 3);

    v.push(ParamSpec { name: "entropy.mu".into(), shape: vec![cy], init: ParamInit::Const(0.0) });
    v.push(ParamSpec { name: "entropy.log_sigma".into(), shape: vec![cy], init: ParamInit::Const(0.0) });
    v
}

/// A config and its materialized tensors.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar = f32> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters for `config`, drawn from per-name streams.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for s in parameter_specs(config) {
            let t = s.init.build(seed, &s.name, &s.shape);
            if tensors.insert(s.name.clone(), t).is_some() {
                return Err(Error::Invalid(format!("duplicate parameter name {}", s.name)));
            }
        }
        Ok(ModelParams { config: config.clone(), tensors })
    }

    /// Adopt an existing name -> tensor map, verifying it matches the
    /// config's spec list exactly (no missing, no extra, same shapes).
    pub fn from_map(config: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<ModelParams<T>> {
        config.validate()?;
        let specs = parameter_specs(config);
        for s in &specs {
            match tensors.get(&s.name) {
                None => return Err(Error::Invalid(format!("parameter {} is missing", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::Invalid(format!(
                        "parameter {} has shape {:?}, config wants {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if tensors.len() != specs.len() {
            let known: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = tensors
                .keys()
                .find(|k| !known.contains(&k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Invalid(format!("parameter {extra} does not belong to this config")));
        }
        Ok(ModelParams { config: config.clone(), tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        param(&self.tensors, name)
    }

    /// Shape-checked in-place update; the optimizer's write path.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("parameter {name} is missing")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Invalid(format!(
                "parameter {name}: cannot replace shape {:?} with {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Register every tensor as a differentiable leaf and return the map the
    /// forward pass reads. Iteration order is the name order, so leaf node
    /// ids are reproducible.
    pub fn attach(&self, tape: &mut Tape<T>) -> BTreeMap<String, Tensor<T>> {
        self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect()
    }
}

impl ModelParams<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.tensors)
    }

    /// Load and validate a checkpoint against `config`.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<ModelParams<f32>> {
        let tensors = load_checkpoint(path)?;
        ModelParams::from_map(config, tensors)
    }

    /// FNV-1a fingerprint of the canonical config text and every weight, in
    /// name order. Any change to architecture or values changes the id.
    pub fn model_id(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        fnv_update(&mut h, self.config.to_text().as_bytes());
        for (name, t) in &self.tensors {
            fnv_update(&mut h, name.as_bytes());
            for &v in t.data() {
                fnv_update(&mut h, &v.to_le_bytes());
            }
        }
        h
    }
}

fn fnv_update(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= u64::from(b);
        *h = h.wrapping_mul(0x100000001b3);
    }
}

/// Lookup in a forward-pass parameter map (stored tensors or tape leaves).
pub fn param<'a, T: Scalar>(map: &'a BTreeMap<String, Tensor<T>>, name: &str) -> Result<&'a Tensor<T>> {
    map.get(name).ok_or_else(|| Error::Invalid(format!("parameter {name} is missing")))
}
