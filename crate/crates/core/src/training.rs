//! Adam, the cosine schedule, the sampling-driven training loop and
//! resumable checkpoints.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "BIAXCKP1" | version u32 | config: u32 len + JSON
//! | n_params u32 | per param: u32 len + name, ndim u32, dims u64…, data f64…
//! | step u64 | adam_step u64 | rng seed u64 | rng word_pos u128
//! | n_losses u64 | losses f64… | per param: m f64…, v f64…
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, Patient, Sampler};
use crate::graph::Graph;
use crate::model::{batch_tensor, Model, ModelConfig, ModelError, ParamStore};
use crate::signal::{Outcome, Segment};
use crate::tensor::{Rng, RngState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIAXCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {param} at step {step}")]
    NonFiniteGrad { param: String, step: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("training cohort lacks the {0:?} class")]
    MissingClass(Outcome),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("writing training log: {0}")]
    Log(std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
    pub divergence_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            lr: 1e-4,
            lr_min: 0.0,
            iterations: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: None,
            divergence_limit: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return fail("need 0 <= lr_min <= lr and lr > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("betas must lie in [0, 1) and eps must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Fails before touching anything if a
    /// gradient is non-finite.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> std::result::Result<(), String> {
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(params.names()[i].clone());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub model: Model,
    pub adam: Adam,
    pub rng: Rng,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg)?;
        let adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self {
            step: 0,
            model,
            adam,
            rng: Rng::new(cfg.seed),
            losses: Vec::new(),
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Factor applied by gradient clipping, when it triggered.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clip_scale: Option<f64>,
}

/// Forward + backward on one batch. Returns (loss, per-parameter grads).
pub fn loss_and_grads(model: &Model, segs: &[&Segment], dropout: Option<&mut Rng>) -> Result<(f64, Vec<Vec<f64>>)> {
    let x = batch_tensor(segs)?;
    let targets: Vec<f64> = segs.iter().map(|s| s.label.target()).collect();
    let mut g = Graph::new();
    let mut pass = model.pass(&mut g, dropout);
    let xv = pass.g.constant(x);
    let out = model.forward(&mut pass, xv)?;
    let vars = pass.param_vars().to_vec();
    let loss = g.bce(out.p_poor, &targets)?;
    g.backward(loss)?;
    let value = g.value(loss).item()?;
    let grads = vars
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

fn require_both_classes(patients: &[Patient]) -> Result<()> {
    for class in [Outcome::Good, Outcome::Poor] {
        if !patients.iter().any(|p| p.label == class && p.is_usable()) {
            return Err(TrainError::MissingClass(class));
        }
    }
    Ok(())
}

/// Runs steps `state.step .. min(until, cfg.iterations)`.
///
/// Each step draws `batch_size` segments patient-first, applies dropout with
/// the same generator, and takes one Adam step at the scheduled rate. One
/// JSON record per step goes to `log`; `on_checkpoint` runs every
/// `checkpoint_every` steps.
pub fn train_loop(
    state: &mut TrainState,
    cfg: &TrainConfig,
    patients: &[Patient],
    until: usize,
    mut log: Option<&mut dyn Write>,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let end = until.min(cfg.iterations);
    if state.step >= end {
        return Ok(());
    }
    require_both_classes(patients)?;
    let sampler = Sampler::new(patients)?;
    while state.step < end {
        let step = state.step;
        let lr = cosine_lr(step, cfg.iterations, cfg.lr, cfg.lr_min);
        let segs: Vec<&Segment> = (0..cfg.batch_size).map(|_| sampler.draw(&mut state.rng)).collect();
        let (loss, mut grads) = loss_and_grads(&state.model, &segs, Some(&mut state.rng))?;
        if !loss.is_finite() || loss > cfg.divergence_limit {
            return Err(TrainError::Diverged { step, loss });
        }
        let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let mut clip_scale = None;
        if let Some(max) = cfg.clip_norm {
            if grad_norm > max {
                let s = max / grad_norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
                log::info!("step {step}: gradient norm {grad_norm:.4e} clipped to {max:.4e}");
                clip_scale = Some(s);
            }
        }
        state
            .adam
            .update(&mut state.model.params, &grads, lr)
            .map_err(|param| TrainError::NonFiniteGrad { param, step })?;
        state.step += 1;
        state.losses.push(loss);
        if let Some(w) = log.as_mut() {
            let rec = StepRecord {
                step,
                lr,
                loss,
                grad_norm,
                clip_scale,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(TrainError::Log)?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_string(&state.model.config).expect("config serializes");
    put_bytes(&mut out, cfg.as_bytes());
    let params = &state.model.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_bytes(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    let rng = state.rng.state();
    out.extend_from_slice(&(state.step as u64).to_le_bytes());
    out.extend_from_slice(&state.adam.step.to_le_bytes());
    out.extend_from_slice(&rng.seed.to_le_bytes());
    out.extend_from_slice(&rng.word_pos.to_le_bytes());
    out.extend_from_slice(&(state.losses.len() as u64).to_le_bytes());
    put_f64s(&mut out, &state.losses);
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        put_f64s(&mut out, m);
        put_f64s(&mut out, v);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            TrainError::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| TrainError::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrainError::Checkpoint("invalid UTF-8".into()))
    }
}

/// Rebuilds a training state; parameter names and shapes must match the
/// echoed configuration.
pub fn decode_checkpoint(buf: &[u8]) -> Result<TrainState> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg: ModelConfig = serde_json::from_str(&c.string()?)
        .map_err(|e| TrainError::Checkpoint(format!("config echo: {e}")))?;
    let mut model = Model::new(cfg)?;
    let n = c.u32()? as usize;
    if n != model.params.len() {
        return Err(TrainError::Checkpoint(format!(
            "{n} parameters stored, configuration defines {}",
            model.params.len()
        )));
    }
    for i in 0..n {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected = model.params.names()[i].clone();
        let target = &mut model.params.tensors_mut()[i];
        if name != expected || target.shape() != shape.as_slice() {
            return Err(TrainError::Checkpoint(format!(
                "parameter {i} is {name} {shape:?}, expected {expected} {:?}",
                target.shape()
            )));
        }
        let data = c.f64s(target.len())?;
        target.data_mut().copy_from_slice(&data);
    }
    let step = c.u64()? as usize;
    let adam_step = c.u64()?;
    let rng = Rng::from_state(RngState {
        seed: c.u64()?,
        word_pos: c.u128()?,
    });
    let n_losses = c.u64()? as usize;
    let losses = c.f64s(n_losses)?;
    let mut adam = Adam::new(&model.params, 0.9, 0.999, 1e-8);
    adam.step = adam_step;
    for (i, t) in model.params.tensors().iter().enumerate() {
        adam.m[i] = c.f64s(t.len())?;
        adam.v[i] = c.f64s(t.len())?;
    }
    if c.pos != buf.len() {
        return Err(TrainError::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(TrainState {
        step,
        model,
        adam,
        rng,
        losses,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a checkpoint; Adam constants come from `cfg`, which is not stored.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let buf = fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut state = decode_checkpoint(&buf)?;
    state.adam.beta1 = cfg.beta1;
    state.adam.beta2 = cfg.beta2;
    state.adam.eps = cfg.eps;
    Ok(state)
}

/// All parameter values in store order.
pub fn flatten_params(model: &Model) -> Vec<f64> {
    model.params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}
