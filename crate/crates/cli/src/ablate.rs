//! Ablation arms. Every variant shares the run's seeds and differs from the
//! base configuration in one setting only.

use std::fs;
use std::path::Path;

use biaxial::dataset::{load_cohort, Patient};
use biaxial::evaluate::{groups, table_rows, FoldRecord};
use biaxial::metrics::{render_table, MetricRow};
use biaxial::model::{Architecture, ValueSource};
use biaxial::rf::ConvStackSpec;
use serde::{Deserialize, Serialize};

use crate::commands::{load_patients, train_fold};
use crate::config::{Overrides, RunConfig};
use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Arm {
    TemporalOnly,
    SpatialOnly,
    ConditionSwap,
    WindowSize,
    SegmentCount,
    ReceptiveField,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Self::TemporalOnly => "temporal_only",
            Self::SpatialOnly => "spatial_only",
            Self::ConditionSwap => "condition_swap",
            Self::WindowSize => "window_size",
            Self::SegmentCount => "segment_count",
            Self::ReceptiveField => "receptive_field",
        }
    }

    fn first_column(self) -> &'static str {
        match self {
            Self::TemporalOnly | Self::SpatialOnly => "Model",
            Self::ConditionSwap => "Conditioning",
            Self::WindowSize => "Window size",
            Self::SegmentCount => "No. segments",
            Self::ReceptiveField => "Receptive field",
        }
    }
}

pub const SPATIAL_BY_TEMPORAL: &str = "Spatial weighted by Temporal";
pub const TEMPORAL_BY_SPATIAL: &str = "Temporal weighted by Spatial";

/// A labelled configuration to train and evaluate.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

/// The variants an arm runs. The segment-count arm is a single training run
/// evaluated at several counts.
pub fn variants(arm: Arm, base: &RunConfig) -> Result<Vec<Variant>> {
    let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant {
            label: label.to_string(),
            config,
        }
    };
    let full = |c: &mut RunConfig| c.model.architecture = Architecture::Full;
    let out = match arm {
        Arm::TemporalOnly => vec![
            with("Two-stage", &full),
            with("Temporal only", &|c| c.model.architecture = Architecture::TemporalOnly),
        ],
        Arm::SpatialOnly => vec![
            with("Two-stage", &full),
            with("Spatial only", &|c| c.model.architecture = Architecture::SpatialOnly),
        ],
        Arm::ConditionSwap => vec![
            with(SPATIAL_BY_TEMPORAL, &|c| {
                full(c);
                c.model.decoder_value_source = ValueSource::Temporal;
            }),
            with(TEMPORAL_BY_SPATIAL, &|c| {
                full(c);
                c.model.decoder_value_source = ValueSource::Spatial;
            }),
        ],
        Arm::WindowSize => base
            .ablate
            .window_minutes
            .iter()
            .map(|&w| {
                with(&format!("{w} min"), &|c| {
                    c.pipeline.segment_minutes = w;
                    c.model.segment_len = c.pipeline.segment_len();
                })
            })
            .collect(),
        Arm::SegmentCount => vec![with("segment counts", &|c| {
            c.eval.k_segments.clone_from(&c.ablate.segment_counts);
        })],
        Arm::ReceptiveField => base
            .ablate
            .rf_stacks
            .iter()
            .map(|stack| {
                let spec = ConvStackSpec::new(stack.clone(), base.model.segment_len, f64::from(base.pipeline.fs_out));
                let report = spec.report().map_err(|e| CliError::Config(e.to_string()))?;
                let label = format!(
                    "r = {} ({:.1} s), o = {}",
                    report.final_field(),
                    report.r_seconds,
                    report.final_tokens()
                );
                Ok(with(&label, &|c| c.model.conv_stack.clone_from(stack)))
            })
            .collect::<Result<_>>()?,
    };
    for v in &out {
        v.config
            .validate()
            .map_err(|e| CliError::Config(format!("{} variant {:?}: {e}", arm.name(), v.label)))?;
    }
    Ok(out)
}

/// Trains and evaluates one configuration on every fold, in memory.
pub fn run_variant(cfg: &RunConfig, patients: &[Patient]) -> Result<Vec<FoldRecord>> {
    let mut records = Vec::new();
    for g in cfg.folds(&groups(patients))? {
        records.extend(train_fold(cfg, patients, &g, None)?.1);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub arm: Arm,
    pub variant: String,
    pub fold: FoldRecord,
}

/// Fold-averaged row over every hour, relabelled.
fn summary_row(records: &[FoldRecord], k: usize, label: &str) -> Result<MetricRow> {
    let mut row = table_rows(records, None, k)?.pop().expect("average row");
    row.label = label.to_string();
    Ok(row)
}

/// Runs an arm on an already loaded cohort and returns the table rows and
/// the underlying records.
pub fn run_arm(arm: Arm, base: &RunConfig, patients: &[Patient]) -> Result<(Vec<MetricRow>, Vec<AblationRecord>)> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for v in variants(arm, base)? {
        let reloaded;
        let cohort = if v.config.pipeline == base.pipeline {
            patients
        } else {
            reloaded = load_cohort(&v.config.manifest, &v.config.pipeline)?;
            &reloaded[..]
        };
        let records = run_variant(&v.config, cohort)?;
        if arm == Arm::SegmentCount {
            for &k in &v.config.eval.k_segments {
                rows.push(summary_row(&records, k, &k.to_string())?);
            }
        } else {
            rows.push(summary_row(&records, v.config.eval.k_segments[0], &v.label)?);
        }
        all.extend(records.into_iter().map(|fold| AblationRecord {
            arm,
            variant: v.label.clone(),
            fold,
        }));
    }
    Ok((rows, all))
}

/// `ablate` subcommand: writes `ablation/<arm>/{table.txt,records.jsonl}`.
pub fn ablate(config: &Path, arm: Arm, overrides: &Overrides) -> Result<String> {
    let cfg = RunConfig::load(config, overrides)?;
    let patients = load_patients(&cfg)?;
    let (rows, records) = run_arm(arm, &cfg, &patients)?;
    let dir = cfg.output_dir.join("ablation").join(arm.name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let title = format!("Ablation: {} (averaged over held-out groups, all hours)", arm.name());
    let table = render_table(&title, arm.first_column(), &rows);
    let table_path = dir.join("table.txt");
    fs::write(&table_path, &table).map_err(io_err(&table_path))?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    let rec_path = dir.join("records.jsonl");
    fs::write(&rec_path, lines).map_err(io_err(&rec_path))?;
    Ok(table)
}
