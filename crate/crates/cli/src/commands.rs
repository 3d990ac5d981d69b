//! Subcommand implementations. Each returns the text it prints so tests can
//! inspect it without capturing stdout.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use biaxial::dataset::{load_cohort, write_cohort, Patient};
use biaxial::evaluate::{evaluate_group, groups, split_by_group, table_rows, FoldRecord};
use biaxial::metrics::render_table;
use biaxial::rf::ReferenceStack;
use biaxial::training::{load_checkpoint, save_checkpoint, train_loop, TrainState};

use crate::config::{Overrides, RunConfig, StackFile};
use crate::error::{io_err, CliError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TABLES_FILE: &str = "tables.txt";
pub const CSV_FILE: &str = "tables.csv";

/// Writes the configured cohort. `out` replaces the manifest's directory.
pub fn synth(config: &Path, overrides: &Overrides) -> Result<String> {
    let cfg = RunConfig::load(config, &Overrides { output_dir: None, ..overrides.clone() })?;
    let (dir, manifest_path) = match &overrides.output_dir {
        Some(d) => (d.clone(), d.join("manifest.toml")),
        None => (
            cfg.manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
            cfg.manifest.clone(),
        ),
    };
    let (written, manifest) = write_cohort(&cfg.cohort, &dir)?;
    if written != manifest_path {
        fs::rename(&written, &manifest_path).map_err(io_err(&manifest_path))?;
    }
    let n_rec: usize = manifest.patients.iter().map(|p| p.recordings.len()).sum();
    Ok(format!(
        "wrote {} patients ({n_rec} recordings) to {}\n",
        manifest.patients.len(),
        manifest_path.display()
    ))
}

/// Per-layer output length, jump and receptive field of a stack file.
pub fn rf_calc(stack: &Path) -> Result<String> {
    let spec = StackFile::load(stack)?.spec()?;
    let report = spec.report().map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = report.render();
    if let Some(reference) = ReferenceStack::find(&spec.layers) {
        let notes = report.mismatches(reference);
        if notes.is_empty() {
            out.push_str(&format!("matches the listed values for the {} column\n", reference.label));
        } else {
            out.push_str(&format!(
                "note: the listed values for the {} column disagree with the computed ones: {}\n",
                reference.label,
                notes.join("; ")
            ));
        }
    }
    Ok(out)
}

/// Loads the cohort named by `cfg`, failing with a config error when the
/// manifest is missing.
pub fn load_patients(cfg: &RunConfig) -> Result<Vec<Patient>> {
    if !cfg.manifest.is_file() {
        return Err(CliError::Config(format!(
            "manifest {} does not exist (run `biaxial synth` first)",
            cfg.manifest.display()
        )));
    }
    Ok(load_cohort(&cfg.manifest, &cfg.pipeline)?)
}

/// Group ids become directory names.
fn fold_dir_name(group: &str) -> String {
    group
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Where a fold's checkpoints and step log go.
pub struct FoldOutput<'a> {
    pub dir: &'a Path,
}

/// Trains on every group except `group` and evaluates on it. Without an
/// output nothing touches the disk.
pub fn train_fold(
    cfg: &RunConfig,
    patients: &[Patient],
    group: &str,
    output: Option<FoldOutput<'_>>,
) -> Result<(TrainState, Vec<FoldRecord>)> {
    let (train, test) = split_by_group(patients, group)?;
    let mut state = TrainState::new(cfg.model.clone(), &cfg.train)?;
    match output {
        Some(out) => {
            let name = fold_dir_name(group);
            let ckpt_dir = out.dir.join("checkpoints").join(&name);
            let log_dir = out.dir.join("logs");
            for d in [&ckpt_dir, &log_dir] {
                fs::create_dir_all(d).map_err(io_err(d))?;
            }
            let log_path = log_dir.join(format!("{name}.jsonl"));
            let file = File::create(&log_path).map_err(io_err(&log_path))?;
            let mut log = BufWriter::new(file);
            train_loop(&mut state, &cfg.train, &train, cfg.train.iterations, Some(&mut log), |s| {
                save_checkpoint(s, &ckpt_dir.join(format!("step-{:06}.ckpt", s.step)))
            })?;
            log.flush().map_err(io_err(&log_path))?;
            save_checkpoint(&state, &ckpt_dir.join("final.ckpt"))?;
        }
        None => train_loop(&mut state, &cfg.train, &train, cfg.train.iterations, None, |_| Ok(()))?,
    }
    if let Some(last) = state.losses.last() {
        log::info!("fold {group}: {} steps, final loss {last:.4}", state.step);
    }
    let records = evaluate_group(&state.model, &test, group, &cfg.eval)?;
    Ok((state, records))
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_copy = out.join("config.toml");
    fs::write(&cfg_copy, cfg.to_toml()).map_err(io_err(&cfg_copy))?;
    let manifest_copy = out.join("manifest.toml");
    fs::copy(&cfg.manifest, &manifest_copy).map_err(io_err(&manifest_copy))?;
    Ok(())
}

/// Trains one model per held-out fold, saves checkpoints and step logs,
/// evaluates each fold and writes metric records and tables.
pub fn train(config: &Path, overrides: &Overrides) -> Result<String> {
    let cfg = RunConfig::load(config, overrides)?;
    let patients = load_patients(&cfg)?;
    let folds = cfg.folds(&groups(&patients))?;
    prepare_output(&cfg)?;
    let mut records = Vec::new();
    for g in &folds {
        let (_, recs) = train_fold(&cfg, &patients, g, Some(FoldOutput { dir: &cfg.output_dir }))?;
        records.extend(recs);
    }
    write_results(&cfg.output_dir, &records)
}

/// Re-evaluates the final checkpoint of every fold with the current
/// evaluation settings.
pub fn eval(config: &Path, overrides: &Overrides) -> Result<String> {
    let cfg = RunConfig::load(config, overrides)?;
    let patients = load_patients(&cfg)?;
    let folds = cfg.folds(&groups(&patients))?;
    let mut records = Vec::new();
    for g in &folds {
        let path = cfg
            .output_dir
            .join("checkpoints")
            .join(fold_dir_name(g))
            .join("final.ckpt");
        if !path.is_file() {
            return Err(CliError::Config(format!(
                "no checkpoint for fold {g} at {} (run `biaxial train` first)",
                path.display()
            )));
        }
        let state = load_checkpoint(&path, &cfg.train)?;
        if state.model.config != cfg.model {
            return Err(CliError::Config(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        let (_, test) = split_by_group(&patients, g)?;
        records.extend(evaluate_group(&state.model, &test, g, &cfg.eval)?);
    }
    write_results(&cfg.output_dir, &records)
}

/// Renders the tables of an existing results directory.
pub fn report(dir: &Path) -> Result<String> {
    let records = read_records(&dir.join(METRICS_FILE))?;
    write_tables(dir, &records)
}

fn write_results(dir: &Path, records: &[FoldRecord]) -> Result<String> {
    let path = dir.join(METRICS_FILE);
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    write_tables(dir, records)
}

pub fn read_records(path: &Path) -> Result<Vec<FoldRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| CliError::Record {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
        })
        .collect()
}

fn horizon_label(h: Option<u16>) -> String {
    match h {
        None => "all hours".into(),
        Some(h) => format!("hours < {h}"),
    }
}

/// One table per (segment count, horizon): held-out groups plus average.
pub fn render_tables(records: &[FoldRecord]) -> Result<String> {
    let mut out = String::new();
    for (k, h) in table_keys(records) {
        let rows = table_rows(records, h, k)?;
        let title = format!("Held-out groups, k = {k} segment(s), {}", horizon_label(h));
        out.push_str(&render_table(&title, "Group", &rows));
        out.push('\n');
    }
    Ok(out)
}

fn table_keys(records: &[FoldRecord]) -> Vec<(usize, Option<u16>)> {
    let mut keys: Vec<(usize, Option<u16>)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.k_segments, r.horizon)) {
            keys.push((r.k_segments, r.horizon));
        }
    }
    keys
}

fn write_tables(dir: &Path, records: &[FoldRecord]) -> Result<String> {
    let text = render_tables(records)?;
    let path = dir.join(TABLES_FILE);
    fs::write(&path, &text).map_err(io_err(&path))?;
    write_csv(&dir.join(CSV_FILE), records)?;
    Ok(text)
}

fn write_csv(path: &PathBuf, records: &[FoldRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| CliError::Record {
        path: path.clone(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["k_segments", "horizon", "label", "sm", "f1", "auroc", "auprc", "n"])
        .map_err(csv_err)?;
    for (k, h) in table_keys(records) {
        for row in table_rows(records, h, k)? {
            w.write_record([
                k.to_string(),
                h.map_or_else(String::new, |h| h.to_string()),
                row.label.clone(),
                row.sm.to_string(),
                row.f1.to_string(),
                row.auroc.to_string(),
                row.auprc.to_string(),
                row.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(path))
}
