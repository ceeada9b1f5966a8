use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate;
use super::train::fit;
use crate::dataset::load_dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,ap50\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{}", r.label, r.ap50);
        }
        out
    }

    /// Plain-text table with AP50 shown as a percentage.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(std::iter::once("config".len()))
            .max()
            .unwrap_or(0);
        let mut out = format!("{:<width$}  {:>6}\n", "config", "AP50");
        let _ = writeln!(out, "{}  {}", "-".repeat(width), "-".repeat(6));
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>6.2}", r.label, 100.0 * r.ap50);
        }
        out
    }
}

/// A dataset pair produced by one encoder combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDataset {
    pub label: String,
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
}

/// Trains and evaluates once per proposal budget `k`, with everything else
/// held fixed. Uses `cfg.train_dir` for training and `cfg.val_dir` for scoring.
pub fn ablate_top_k(cfg: &RunConfig, ks: &[usize]) -> Result<AblationResult> {
    if ks.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one k".into()));
    }
    let require = |p: &Option<PathBuf>, name: &str| {
        p.clone()
            .ok_or_else(|| Error::InvalidConfig(format!("{name} is required for ablation")))
    };
    let train = load_dataset(require(&cfg.train_dir, "train_dir")?)?;
    let val = load_dataset(require(&cfg.val_dir, "val_dir")?)?;

    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let run = RunConfig {
            top_k: k,
            ..cfg.clone()
        };
        let outcome = fit(&train, None, &run)?;
        let report = evaluate(&outcome.model, &val, &run)?;
        rows.push(AblationRow {
            label: format!("top-{k}"),
            ap50: report.ap50,
        });
    }
    Ok(AblationResult { rows })
}

/// One train-and-evaluate run per encoder dataset.
pub fn ablate_encoders(datasets: &[EncoderDataset], cfg: &RunConfig) -> Result<AblationResult> {
    if datasets.is_empty() {
        return Err(Error::InvalidConfig(
            "encoder ablation needs at least one dataset".into(),
        ));
    }
    let mut rows = Vec::with_capacity(datasets.len());
    for entry in datasets {
        let train = load_dataset(&entry.train_dir)?;
        let eval_data = load_dataset(&entry.eval_dir)?;
        let outcome = fit(&train, None, cfg)?;
        let report = evaluate(&outcome.model, &eval_data, cfg)?;
        rows.push(AblationRow {
            label: entry.label.clone(),
            ap50: report.ap50,
        });
    }
    Ok(AblationResult { rows })
}
