//! Classifier families: a bidirectional diagonal S4 network and XResNet1d.
//!
//! Both networks map a batch of `leads × input_len` crops to per-label
//! logits and provide an exact reverse-mode gradient of the mean binary
//! cross-entropy. The layer equations are written out in
//! `docs/model-equations.md`; parameter names follow that file.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::Scorer;

pub mod checkpoint;
pub mod ops;
pub mod s4;
pub mod xresnet;

pub use checkpoint::{CheckpointError, ModelCheckpoint};
pub use s4::{s4_kernel, DiagonalSsm};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter tensor {0}")]
    MissingParameter(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "S4")]
    S4,
    #[serde(rename = "XRESNET1D")]
    XResNet1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published dimensions.
    Paper,
    /// Reduced widths for CPU training.
    Desk,
    /// Minimal widths for tests and smoke runs.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct S4Config {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub bidirectional: bool,
    /// Range of the log-uniform discretization-step initialization.
    pub dt_min: f64,
    pub dt_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XResNetConfig {
    pub stage_depths: Vec<usize>,
    pub base_width: usize,
    /// Kernel size of the middle convolution in each bottleneck block.
    pub kernel_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum Architecture {
    #[serde(rename = "S4")]
    S4(S4Config),
    #[serde(rename = "XRESNET1D")]
    XResNet1d(XResNetConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_leads: usize,
    pub n_labels: usize,
    pub input_len: usize,
    pub dropout: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub arch: Architecture,
}

impl ModelConfig {
    pub fn preset(family: Family, preset: Preset, in_leads: usize, n_labels: usize) -> Self {
        let arch = match family {
            // Tiny trades depth for width: one channel group per label
            // learns faster than a deep narrow stack at equal cost.
            Family::S4 => Architecture::S4(S4Config {
                n_layers: if preset == Preset::Tiny { 2 } else { 4 },
                d_model: match preset {
                    Preset::Paper => 512,
                    Preset::Desk => 64,
                    Preset::Tiny => 32,
                },
                d_state: 8,
                bidirectional: true,
                dt_min: 1e-3,
                dt_max: 1e-1,
            }),
            Family::XResNet1d => Architecture::XResNet1d(XResNetConfig {
                stage_depths: vec![3, 4, 6, 3],
                base_width: match preset {
                    Preset::Paper => 64,
                    Preset::Desk => 32,
                    Preset::Tiny => 4,
                },
                kernel_size: 3,
            }),
        };
        ModelConfig { in_leads, n_labels, input_len: 250, dropout: 0.1, seed: 0, arch }
    }

    pub fn family(&self) -> Family {
        match self.arch {
            Architecture::S4(_) => Family::S4,
            Architecture::XResNet1d(_) => Family::XResNet1d,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.in_leads == 0 || self.n_labels == 0 || self.input_len == 0 {
            return bad("in_leads, n_labels and input_len must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        match &self.arch {
            Architecture::S4(c) => {
                if c.n_layers == 0 || c.d_model == 0 || c.d_state == 0 {
                    return bad("S4 dims must be at least 1");
                }
                if !(c.dt_min > 0.0 && c.dt_min <= c.dt_max) {
                    return bad("need 0 < dt_min <= dt_max");
                }
            }
            Architecture::XResNet1d(c) => {
                if c.stage_depths.is_empty() || c.stage_depths.contains(&0) || c.base_width == 0 {
                    return bad("XResNet1d stage depths and base width must be at least 1");
                }
                if c.kernel_size % 2 == 0 {
                    return bad("XResNet1d kernel size must be odd");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named trainable tensors plus non-trainable buffers (normalization
/// running statistics). Gradients use the same type with no buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingParameter(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.buffers.get(name).ok_or_else(|| ModelError::MissingParameter(name.into()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.keys().map(String::as_str).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zero tensors with the same names and shapes, without buffers.
    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape))).collect(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().chain(self.buffers.values()).all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Parameters) {
        for (k, t) in &mut self.tensors {
            if let Some(o) = other.tensors.get(k) {
                t.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Mutable slices for several distinct tensors at once.
    pub(crate) fn slices_mut<const N: usize>(&mut self, names: [&str; N]) -> [&mut [f64]; N] {
        let mut out: [Option<&mut [f64]>; N] = std::array::from_fn(|_| None);
        for (k, t) in self.tensors.iter_mut() {
            if let Some(i) = names.iter().position(|n| n == k) {
                out[i] = Some(&mut t.data);
            }
        }
        out.map(|s| s.expect("gradient tensor missing"))
    }

    pub(crate) fn grad_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self.tensors.get_mut(name).expect("gradient tensor missing").data
    }
}

/// A batch of crops, flat `[n][leads][len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub leads: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn from_crops(crops: &[Vec<Vec<f64>>]) -> Result<Self, ModelError> {
        let leads = crops.first().map_or(0, Vec::len);
        let len = crops.first().and_then(|c| c.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(crops.len() * leads * len);
        for c in crops {
            if c.len() != leads || c.iter().any(|l| l.len() != len) {
                return Err(ModelError::ShapeMismatch("crops differ in shape".into()));
            }
            c.iter().for_each(|l| data.extend_from_slice(l));
        }
        Ok(Batch { n: crops.len(), leads, len, data })
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.leads * self.len..(i + 1) * self.leads * self.len]
    }

    /// Sub-batch of the listed rows.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(rows.len() * self.leads * self.len);
        rows.iter().for_each(|&r| data.extend_from_slice(self.sample(r)));
        Batch { n: rows.len(), leads: self.leads, len: self.len, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout off, normalization with running statistics.
    Eval,
    /// Dropout on (masks drawn from `dropout_seed`), batch statistics.
    Train { dropout_seed: u64 },
}

/// Result of a forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Parameters,
    /// New values for normalization buffers after a train-mode pass.
    pub buffer_updates: Vec<(String, Tensor)>,
}

/// Mean binary cross-entropy over batch and labels, in the stable
/// `max(z,0) − z·y + ln(1+e^{−|z|})` form.
pub fn loss(logits: &[f64], targets: &[f64]) -> f64 {
    ops::bce_with_logits(logits, targets)
}

#[derive(Debug, Clone)]
pub enum Network {
    S4(s4::S4Network),
    XResNet1d(xresnet::XResNet),
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(match &cfg.arch {
            Architecture::S4(c) => Network::S4(s4::S4Network::new(cfg, c)),
            Architecture::XResNet1d(c) => Network::XResNet1d(xresnet::XResNet::new(cfg, c)),
        })
    }

    /// Fresh parameters drawn from a ChaCha8 stream seeded by `cfg.seed`.
    pub fn init(&self) -> Parameters {
        match self {
            Network::S4(n) => n.init(),
            Network::XResNet1d(n) => n.init(),
        }
    }

    pub fn n_labels(&self) -> usize {
        match self {
            Network::S4(n) => n.n_labels,
            Network::XResNet1d(n) => n.n_labels,
        }
    }

    fn check(&self, batch: &Batch) -> Result<(), ModelError> {
        let leads = match self {
            Network::S4(n) => n.in_leads,
            Network::XResNet1d(n) => n.in_leads,
        };
        if batch.leads != leads || batch.len == 0 || batch.n == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "batch {}x{}x{} for a {leads}-lead model",
                batch.n, batch.leads, batch.len
            )));
        }
        if batch.data.len() != batch.n * batch.leads * batch.len {
            return Err(ModelError::ShapeMismatch("batch data length".into()));
        }
        Ok(())
    }

    /// Logits, flat `[n][n_labels]`.
    pub fn forward(&self, params: &Parameters, batch: &Batch, mode: ForwardMode) -> Result<Vec<f64>, ModelError> {
        self.check(batch)?;
        match self {
            Network::S4(n) => n.forward(params, batch, mode),
            Network::XResNet1d(n) => n.forward(params, batch, mode),
        }
    }

    /// Loss and its exact gradient for `targets` flat `[n][n_labels]`.
    pub fn loss_and_gradient(
        &self,
        params: &Parameters,
        batch: &Batch,
        targets: &[f64],
        mode: ForwardMode,
    ) -> Result<StepOutput, ModelError> {
        self.check(batch)?;
        if targets.len() != batch.n * self.n_labels() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} targets for {} rows of {} labels",
                targets.len(),
                batch.n,
                self.n_labels()
            )));
        }
        let out = match self {
            Network::S4(n) => n.loss_and_gradient(params, batch, targets, mode)?,
            Network::XResNet1d(n) => n.loss_and_gradient(params, batch, targets, mode)?,
        };
        if let Some((name, _)) = out.grads.tensors().find(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::NonFiniteGradient(name.clone()));
        }
        Ok(out)
    }

    /// Sigmoid probabilities in eval mode, rows in batch order.
    pub fn predict_proba(&self, params: &Parameters, batch: &Batch) -> Result<Vec<Vec<f64>>, ModelError> {
        let logits = self.forward(params, batch, ForwardMode::Eval)?;
        Ok(logits.chunks(self.n_labels()).map(|r| r.iter().map(|&z| ops::sigmoid(z)).collect()).collect())
    }
}

/// Reverse-mode gradient of the mean BCE.
pub fn gradient(
    net: &Network,
    params: &Parameters,
    batch: &Batch,
    targets: &[f64],
    mode: ForwardMode,
) -> Result<Parameters, ModelError> {
    net.loss_and_gradient(params, batch, targets, mode).map(|o| o.grads)
}

/// Network plus parameters, usable as an evaluation scorer.
pub struct Scoring<'a> {
    pub net: &'a Network,
    pub params: &'a Parameters,
}

impl Scorer for Scoring<'_> {
    fn n_labels(&self) -> usize {
        self.net.n_labels()
    }

    fn predict_proba(&self, crops: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
        let batch = Batch::from_crops(crops).expect("crops of one record share a shape");
        self.net.predict_proba(self.params, &batch).expect("scoring batch matches the model")
    }
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Number of samples per gradient shard. Shards are summed in index order,
/// so the reduction does not depend on the thread count.
pub(crate) const SHARD: usize = 4;

/// Maps fixed shards of `0..n` in parallel and folds the results in shard
/// order. `n` must be at least 1.
pub(crate) fn sharded<T, F, R>(n: usize, f: F, mut reduce: R) -> T
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
    R: FnMut(&mut T, T),
{
    let shards: Vec<T> = (0..n.div_ceil(SHARD))
        .into_par_iter()
        .map(|s| f(s * SHARD..((s + 1) * SHARD).min(n)))
        .collect();
    let mut it = shards.into_iter();
    let mut acc = it.next().expect("at least one shard");
    for s in it {
        reduce(&mut acc, s);
    }
    acc
}
