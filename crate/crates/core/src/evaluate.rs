//! Patient-level evaluation and leave-one-group-out folds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Patient;
use crate::metrics::{self, MetricError, MetricRow, ScoreEntry, ScoreSet};
use crate::model::{Model, ModelConfig};
use crate::signal::Segment;
use crate::tensor::Rng;
use crate::training::{train_loop, TrainConfig, TrainError, TrainState};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("no training patients remain after holding out {0:?}")]
    EmptyTraining(String),
    #[error("no held-out patient has a segment before hour {0:?}")]
    NothingToEvaluate(Option<u16>),
    #[error("k_segments must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Segment counts aggregated per patient; each gets its own rows.
    pub k_segments: Vec<usize>,
    /// Horizons in recording hours; a horizon `h` keeps segments with
    /// `hour_index < h`. Empty means all hours only.
    pub horizons: Vec<u16>,
    pub fpr_cap: f64,
    /// Seeds the per-patient segment choice.
    pub seed: u64,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_segments: vec![1],
            horizons: Vec::new(),
            fpr_cap: metrics::DEFAULT_FPR_CAP,
            seed: 0,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub group_id: String,
    pub truth: u8,
    /// Mean p(poor) over the chosen segments.
    pub score: f64,
    /// Mode of the per-segment hard labels (ties → good).
    pub hard: u8,
    pub n_segments: usize,
}

/// FNV-1a, stable across platforms and releases.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Segments eligible under `horizon`, in a patient-specific shuffled order.
/// The first `k` of this order are used, so smaller `k` picks a subset of
/// what larger `k` picks.
pub fn segment_order<'a>(p: &'a Patient, horizon: Option<u16>, seed: u64) -> Vec<&'a Segment> {
    let mut segs: Vec<&Segment> = p
        .segments()
        .filter(|s| horizon.is_none_or(|h| s.hour_index < h))
        .collect();
    let mut rng = Rng::new(seed).fork(stable_hash(&p.patient_id));
    for i in (1..segs.len()).rev() {
        segs.swap(i, rng.below(i + 1));
    }
    segs
}

/// Scores every patient with at least one eligible segment. `score_fn`
/// maps a batch of segments to p(poor) values.
pub fn predict_patients_with<F>(
    patients: &[&Patient],
    k: usize,
    horizon: Option<u16>,
    seed: u64,
    mut score_fn: F,
) -> Result<Vec<PatientPrediction>>
where
    F: FnMut(&[&Segment]) -> Result<Vec<f64>>,
{
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut out = Vec::new();
    for p in patients {
        let chosen: Vec<&Segment> = segment_order(p, horizon, seed).into_iter().take(k).collect();
        if chosen.is_empty() {
            continue;
        }
        let scores = score_fn(&chosen)?;
        let votes: Vec<(String, u8)> = scores
            .iter()
            .map(|&s| (p.patient_id.clone(), u8::from(s >= metrics::F1_THRESHOLD)))
            .collect();
        out.push(PatientPrediction {
            patient_id: p.patient_id.clone(),
            group_id: p.group_id.clone(),
            truth: p.label.as_u8(),
            score: scores.iter().sum::<f64>() / scores.len() as f64,
            hard: metrics::mode_aggregate(&votes)[0].1,
            n_segments: chosen.len(),
        });
    }
    Ok(out)
}

pub fn predict_patients(
    model: &Model,
    patients: &[&Patient],
    k: usize,
    horizon: Option<u16>,
    cfg: &EvalConfig,
) -> Result<Vec<PatientPrediction>> {
    predict_patients_with(patients, k, horizon, cfg.seed, |segs| {
        Ok(model.predict_segments(segs, cfg.batch)?)
    })
}

pub fn metric_row(label: &str, preds: &[PatientPrediction], fpr_cap: f64) -> Result<MetricRow> {
    let set = ScoreSet {
        entries: preds
            .iter()
            .map(|p| ScoreEntry {
                score: p.score,
                truth: p.truth,
                patient_id: p.patient_id.clone(),
                group_id: p.group_id.clone(),
            })
            .collect(),
    };
    let hard: Vec<u8> = preds.iter().map(|p| p.hard).collect();
    Ok(MetricRow::from_scores(label, &set, Some(&hard), fpr_cap)?)
}

/// One structured result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub held_out: String,
    /// `None` means every hour.
    pub horizon: Option<u16>,
    pub k_segments: usize,
    pub row: MetricRow,
}

/// Evaluates a trained model on one group for every configured segment
/// count and horizon. Segment scores are computed once per patient.
pub fn evaluate_group(model: &Model, held_out: &[&Patient], group: &str, cfg: &EvalConfig) -> Result<Vec<FoldRecord>> {
    if cfg.k_segments.is_empty() || cfg.k_segments.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(held_out.len());
    for p in held_out {
        let segs: Vec<&Segment> = p.segments().collect();
        scores.push(model.predict_segments(&segs, cfg.batch)?);
    }
    let horizons: Vec<Option<u16>> = std::iter::once(None).chain(cfg.horizons.iter().map(|&h| Some(h))).collect();
    let mut out = Vec::new();
    for &k in &cfg.k_segments {
        for &horizon in &horizons {
            let preds = predict_patients_with(held_out, k, horizon, cfg.seed, |segs| {
                Ok(segs.iter().map(|s| lookup(held_out, &scores, s)).collect())
            })?;
            if preds.is_empty() {
                return Err(EvalError::NothingToEvaluate(horizon));
            }
            out.push(FoldRecord {
                held_out: group.to_string(),
                horizon,
                k_segments: k,
                row: metric_row(group, &preds, cfg.fpr_cap)?,
            });
        }
    }
    Ok(out)
}

/// Cached score of `seg`, found by patient and position.
fn lookup(patients: &[&Patient], scores: &[Vec<f64>], seg: &Segment) -> f64 {
    let (pi, p) = patients
        .iter()
        .enumerate()
        .find(|(_, p)| p.patient_id == seg.patient_id)
        .expect("segment belongs to an evaluated patient");
    let si = p.segments().position(|s| std::ptr::eq(s, seg)).expect("segment belongs to its patient");
    scores[pi][si]
}

pub fn split_by_group<'a>(patients: &'a [Patient], held_out: &str) -> Result<(Vec<Patient>, Vec<&'a Patient>)> {
    if !patients.iter().any(|p| p.group_id == held_out) {
        return Err(EvalError::UnknownGroup(held_out.to_string()));
    }
    let train: Vec<Patient> = patients.iter().filter(|p| p.group_id != held_out).cloned().collect();
    if train.is_empty() {
        return Err(EvalError::EmptyTraining(held_out.to_string()));
    }
    let test = patients.iter().filter(|p| p.group_id == held_out).collect();
    Ok((train, test))
}

/// Trains on every group except `held_out` and evaluates on it.
pub fn grouped_eval(
    patients: &[Patient],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    held_out: &str,
    log: Option<&mut dyn Write>,
) -> Result<(TrainState, Vec<FoldRecord>)> {
    let (train, test) = split_by_group(patients, held_out)?;
    let mut state = TrainState::new(model_cfg.clone(), train_cfg)?;
    train_loop(&mut state, train_cfg, &train, train_cfg.iterations, log, |_| Ok(()))?;
    let records = evaluate_group(&state.model, &test, held_out, eval_cfg)?;
    Ok((state, records))
}

/// Distinct group ids in order of first appearance.
pub fn groups(patients: &[Patient]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in patients {
        if !out.contains(&p.group_id) {
            out.push(p.group_id.clone());
        }
    }
    out
}

/// Per-group rows for one horizon and segment count, followed by their
/// average.
pub fn table_rows(records: &[FoldRecord], horizon: Option<u16>, k: usize) -> Result<Vec<MetricRow>> {
    let mut rows: Vec<MetricRow> = records
        .iter()
        .filter(|r| r.horizon == horizon && r.k_segments == k)
        .map(|r| r.row.clone())
        .collect();
    let avg = metrics::average_row(&rows, "Avg.")?;
    rows.push(avg);
    Ok(rows)
}
