//! Run configuration: one TOML file describes a whole experiment.
//!
//! Relative paths inside the file resolve against the file's directory.
//! Every section except `manifest` and `output_dir` may be omitted and
//! falls back to its defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use biaxial::dataset::CohortSpec;
use biaxial::evaluate::EvalConfig;
use biaxial::model::ModelConfig;
use biaxial::rf::{ConvLayer, ConvStackSpec};
use biaxial::signal::PipelineConfig;
use biaxial::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Cohort manifest written by `synth` and read by everything else.
    pub manifest: PathBuf,
    /// Results directory.
    pub output_dir: PathBuf,
    /// Groups evaluated as held-out folds; empty means every group.
    #[serde(default)]
    pub held_out: Vec<String>,
    #[serde(default)]
    pub cohort: CohortSpec,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

/// Variant lists for the ablation arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Segment lengths in minutes for the window-size arm.
    pub window_minutes: Vec<usize>,
    /// Segments aggregated per patient for the segment-count arm.
    pub segment_counts: Vec<usize>,
    /// Tokenizer stacks for the receptive-field arm.
    pub rf_stacks: Vec<Vec<ConvLayer>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        let stack = |l: &[(usize, usize)]| l.iter().map(|&(h, s)| ConvLayer::new(h, s)).collect();
        Self {
            window_minutes: vec![3, 5, 10, 12],
            segment_counts: vec![1, 5, 7, 9, 11],
            rf_stacks: vec![
                stack(&[(10, 5), (3, 2), (3, 2), (3, 2)]),
                stack(&[(10, 5), (5, 3), (3, 2), (3, 2)]),
                stack(&[(10, 5), (5, 3), (5, 3), (3, 2)]),
                stack(&[(10, 5), (5, 3), (5, 3), (5, 3)]),
            ],
        }
    }
}

/// Command-line overrides; the only settings flags may change.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Replaces the model, training and evaluation seeds.
    pub seed: Option<u64>,
    /// Replaces the cohort seed.
    pub cohort_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.display()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads, resolves paths, applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| config_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.apply(overrides);
        cfg.validate().map_err(|e| config_err(path, e))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.model.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
        }
        if let Some(s) = o.cohort_seed {
            self.cohort.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir.clone_from(d);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Cross-section consistency checks on top of each section's own.
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.cohort.validate().map_err(|e| e.to_string())?;
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.eval.k_segments.is_empty() || self.eval.k_segments.contains(&0) {
            return Err("eval.k_segments must list positive counts".into());
        }
        if !(self.eval.fpr_cap > 0.0 && self.eval.fpr_cap <= 1.0) || self.eval.batch == 0 {
            return Err("eval.fpr_cap must lie in (0, 1] and eval.batch must be positive".into());
        }
        if self.pipeline.montage.is_empty() || self.pipeline.segment_minutes == 0 {
            return Err("pipeline.montage and pipeline.segment_minutes must be non-empty".into());
        }
        for (a, b) in &self.pipeline.montage {
            for e in [a, b] {
                if !self.cohort.electrodes.iter().any(|x| x.eq_ignore_ascii_case(e)) {
                    return Err(format!("montage electrode {e} is not in cohort.electrodes"));
                }
            }
        }
        if self.model.channels != self.pipeline.montage.len() {
            return Err(format!(
                "model.channels = {} but the montage has {} pairs",
                self.model.channels,
                self.pipeline.montage.len()
            ));
        }
        if self.model.segment_len != self.pipeline.segment_len() {
            return Err(format!(
                "model.segment_len = {} but pipeline segments have {} samples",
                self.model.segment_len,
                self.pipeline.segment_len()
            ));
        }
        for &w in &self.ablate.window_minutes {
            if w == 0 {
                return Err("ablate.window_minutes must be positive".into());
            }
        }
        if self.ablate.segment_counts.contains(&0) {
            return Err("ablate.segment_counts must be positive".into());
        }
        for stack in &self.ablate.rf_stacks {
            ConvStackSpec::new(stack.clone(), self.model.segment_len, f64::from(self.pipeline.fs_out))
                .layer_outputs()
                .map_err(|e| format!("ablate.rf_stacks: {e}"))?;
        }
        Ok(())
    }

    /// Held-out folds: the configured list, or every group of the cohort.
    pub fn folds(&self, available: &[String]) -> Result<Vec<String>> {
        if self.held_out.is_empty() {
            return Ok(available.to_vec());
        }
        for g in &self.held_out {
            if !available.contains(g) {
                return Err(CliError::Config(format!("held_out group {g:?} is not in the cohort")));
            }
        }
        Ok(self.held_out.clone())
    }
}

/// Tokenizer stack file for `rf-calc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackFile {
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    #[serde(default)]
    pub paddings: Option<Vec<usize>>,
    pub input_len: usize,
    pub fs: f64,
}

impl StackFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        toml::from_str(&text).map_err(|e| config_err(path, e))
    }

    pub fn spec(&self) -> Result<ConvStackSpec> {
        let n = self.kernels.len();
        let paddings = self.paddings.clone().unwrap_or_else(|| vec![0; n]);
        if self.strides.len() != n || paddings.len() != n {
            return Err(CliError::Config(format!(
                "{} kernels, {} strides and {} paddings must have equal length",
                n,
                self.strides.len(),
                paddings.len()
            )));
        }
        if !(self.fs > 0.0) {
            return Err(CliError::Config("fs must be positive".into()));
        }
        let layers = (0..n)
            .map(|i| ConvLayer {
                kernel: self.kernels[i],
                stride: self.strides[i],
                padding: paddings[i],
            })
            .collect();
        Ok(ConvStackSpec::new(layers, self.input_len, self.fs))
    }
}
