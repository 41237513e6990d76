//! Training loop: random crops, mean BCE, AdamW with decoupled weight decay,
//! and per-epoch validation with crop-averaged macro AUROC for model
//! selection.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetView, LabeledDataset, Phase, ScenarioSpec, Split};
use crate::eval::{self, EvalError, Matrix};
use crate::models::{Batch, ForwardMode, ModelCheckpoint, ModelConfig, ModelError, Network, Parameters, Scoring};
use crate::signal::CleanEcg;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("record of length {len} is shorter than the crop length {crop}")]
    RecordTooShort { len: usize, crop: usize },
    #[error("non-finite parameter after update in {0}")]
    NonFiniteUpdate(String),
    #[error("training diverged: non-finite loss in epoch {0}")]
    Diverged(usize),
    #[error("{0:?} split is empty after scenario filtering")]
    EmptySplit(Split),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_crop() -> usize {
    250
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Constant-schedule AdamW training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_crop")]
    pub crop_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Parameter-name prefixes excluded from updates.
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            weight_decay: default_wd(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            crop_len: default_crop(),
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.crop_len == 0 {
            return Err(TrainError::InvalidConfig("epochs, batch_size and crop_len must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(TrainError::InvalidConfig("lr and weight_decay must be >= 0, eps > 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(TrainError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Start offset of a uniformly random window of `crop_len` samples.
pub fn crop_start<R: Rng>(len: usize, crop_len: usize, rng: &mut R) -> Result<usize, TrainError> {
    if crop_len == 0 || len < crop_len {
        return Err(TrainError::RecordTooShort { len, crop: crop_len });
    }
    Ok(rng.gen_range(0..=len - crop_len))
}

/// Contiguous window shared by all leads.
pub fn sample_crop<R: Rng>(record: &CleanEcg, crop_len: usize, rng: &mut R) -> Result<Vec<Vec<f64>>, TrainError> {
    let len = record.samples.first().map_or(0, Vec::len);
    let s = crop_start(len, crop_len, rng)?;
    Ok(record.samples.iter().map(|l| l[s..s + crop_len].to_vec()).collect())
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of completed steps.
    pub t: u64,
    pub m: Parameters,
    pub v: Parameters,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        AdamState { t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One AdamW step at `t = state.t + 1`:
/// `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`.
pub fn adamw_step(params: &mut Parameters, grads: &Parameters, state: &mut AdamState, cfg: &TrainConfig) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.tensors_mut() {
        if cfg.is_frozen(name) {
            continue;
        }
        let g = &grads.get(name)?.data;
        let m = &mut state.m.get_mut(name).ok_or_else(|| ModelError::MissingParameter(name.clone()))?.data;
        let v = &mut state.v.get_mut(name).ok_or_else(|| ModelError::MissingParameter(name.clone()))?.data;
        for i in 0..p.data.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            let th = p.data[i];
            p.data[i] = th - cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * th);
        }
        if p.data.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteUpdate(name.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_auroc: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<TrainLogEntry>,
}

struct Loaded {
    signals: Vec<Arc<CleanEcg>>,
    targets: Vec<Vec<f64>>,
}

fn load(view: &DatasetView<'_>) -> Result<Loaded, TrainError> {
    let signals = (0..view.len()).into_par_iter().map(|k| view.signal(k)).collect::<Result<Vec<_>, _>>()?;
    let targets = (0..view.len()).map(|k| view.label_row(k)).collect();
    Ok(Loaded { signals, targets })
}

/// Crop-averaged probabilities for every record of `signals`.
pub fn score_records(net: &Network, params: &Parameters, signals: &[Arc<CleanEcg>], crop_len: usize) -> Result<Matrix<f64>, TrainError> {
    let scorer = Scoring { net, params };
    let rows = signals
        .iter()
        .map(|s| eval::crop_average(&scorer, &s.samples, crop_len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Matrix::from_flat(rows.len(), net.n_labels(), rows.concat())?)
}

fn val_macro(net: &Network, params: &Parameters, val: &Loaded, crop_len: usize) -> Result<Option<f64>, TrainError> {
    let p = score_records(net, params, &val.signals, crop_len)?;
    let y: Vec<u8> = val.targets.iter().flat_map(|r| r.iter().map(|&v| v as u8)).collect();
    let y = Matrix::from_flat(val.targets.len(), net.n_labels(), y)?;
    match eval::macro_auroc(&p, &y) {
        Ok(m) => Ok(Some(m.value)),
        Err(EvalError::AllUndefined) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Trains on the scenario's training subset of folds 1–8 and selects the
/// epoch with the highest validation macro AUROC (first on ties).
/// Validation uses the training-phase subset of fold 9 after the first-ECG
/// filter. `on_epoch` sees each log entry as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &LabeledDataset,
    scenario: &ScenarioSpec,
    mut on_epoch: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if model_cfg.n_labels != dataset.label_set().len() {
        return Err(ModelError::ShapeMismatch(format!(
            "model has {} labels, dataset {}",
            model_cfg.n_labels,
            dataset.label_set().len()
        ))
        .into());
    }
    if model_cfg.input_len != cfg.crop_len {
        return Err(TrainError::InvalidConfig(format!(
            "model input_len {} differs from crop_len {}",
            model_cfg.input_len, cfg.crop_len
        )));
    }
    let scoped = dataset.apply_scenario(scenario, Phase::Train);
    let train_view = scoped.split(Split::Train);
    let val_view = scoped.split(Split::Validation).eval_view();
    if train_view.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val_view.is_empty() {
        return Err(TrainError::EmptySplit(Split::Validation));
    }
    let tr = load(&train_view)?;
    let val = load(&val_view)?;
    let net = Network::new(model_cfg)?;
    let mut params = net.init();
    let mut opt = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Parameters, AdamState)> = None;
    let mut first: Option<(Parameters, AdamState)> = None;
    let mut order: Vec<usize> = (0..tr.signals.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let crops = chunk
                .iter()
                .map(|&i| sample_crop(&tr.signals[i], cfg.crop_len, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let batch = Batch::from_crops(&crops)?;
            let targets: Vec<f64> = chunk.iter().flat_map(|&i| tr.targets[i].iter().copied()).collect();
            let mode = ForwardMode::Train { dropout_seed: rng.gen() };
            let out = net.loss_and_gradient(&params, &batch, &targets, mode)?;
            if !out.loss.is_finite() {
                return Err(TrainError::Diverged(epoch));
            }
            loss_sum += out.loss * chunk.len() as f64;
            seen += chunk.len();
            for (name, t) in out.buffer_updates {
                if let Some(b) = params.buffer_mut(&name) {
                    *b = t;
                }
            }
            adamw_step(&mut params, &out.grads, &mut opt, cfg)?;
        }
        let score = val_macro(&net, &params, &val, cfg.crop_len)?;
        let entry = TrainLogEntry {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_macro_auroc: score,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(&entry);
        log.push(entry);
        if first.is_none() {
            first = Some((params.clone(), opt.clone()));
        }
        if let Some(s) = score {
            if best.as_ref().is_none_or(|b| s > b.0) {
                best = Some((s, epoch, params.clone(), opt.clone()));
            }
        }
    }
    let (score, epoch, params, opt) = match best {
        Some((s, e, p, o)) => (Some(s), e, p, o),
        None => {
            let (p, o) = first.expect("at least one epoch");
            (None, 1, p, o)
        }
    };
    let checkpoint = ModelCheckpoint {
        config: model_cfg.clone(),
        params,
        optimizer: Some(opt),
        epoch,
        val_macro_auroc: score,
        label_codes: dataset.label_set().codes().iter().map(|c| c.to_string()).collect(),
        label_fingerprint: dataset.label_set().fingerprint(),
    };
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Tensor;

    fn scalar(v: f64) -> Parameters {
        let mut p = Parameters::default();
        p.insert("w", Tensor::from_vec(&[1], vec![v]));
        p
    }

    #[test]
    fn adamw_hand_computed_step() {
        let mut p = scalar(1.0);
        let g = scalar(1.0);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap();
        let expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8) + 0.001);
        assert_eq!(p.get("w").unwrap().data[0], expected);
        assert!((expected - 0.998999).abs() < 1e-8);
    }

    #[test]
    fn adamw_fixed_point_and_decay() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = scalar(0.7);
        let g = scalar(0.0);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data[0], 0.7);

        let cfg = TrainConfig::default();
        let mut p = scalar(2.0);
        let mut st = AdamState::new(&p);
        let mut expect = 2.0;
        for _ in 0..10 {
            adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
            expect *= 1.0 - cfg.lr * cfg.weight_decay;
            assert!((p.get("w").unwrap().data[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let cfg = TrainConfig { frozen: vec!["w".into()], ..Default::default() };
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &scalar(3.0), &mut st, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data[0], 1.0);
    }

    #[test]
    fn crop_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(crop_start(250, 250, &mut rng).unwrap(), 0);
        assert!(matches!(crop_start(200, 250, &mut rng), Err(TrainError::RecordTooShort { .. })));
        for _ in 0..1000 {
            assert!(crop_start(1000, 250, &mut rng).unwrap() <= 750);
        }
    }
}
