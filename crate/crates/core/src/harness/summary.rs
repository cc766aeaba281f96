//! Aggregation of per-(mode, seed) results into summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;
use crate::ssl::TrainingMode;

/// Scores of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: TrainingMode,
    pub seed: u64,
    pub dice1: Option<f64>,
    pub dice2: f64,
    pub success: f64,
    pub acc: f64,
    pub config_digest: String,
}

impl CellResult {
    pub fn from_report(mode: TrainingMode, seed: u64, report: &EvaluationReport, digest: &str) -> Self {
        Self {
            mode,
            seed,
            dice1: report.dice1,
            dice2: report.dice2,
            success: report.success,
            acc: report.acc,
            config_digest: digest.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: TrainingMode,
    pub seeds: Vec<u64>,
    /// None when no seed produced any overlapping prediction.
    pub dice1: Option<MeanStd>,
    pub dice2: MeanStd,
    pub success: MeanStd,
    pub acc: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_digest: String,
    pub cells: Vec<CellResult>,
    pub modes: Vec<ModeSummary>,
}

pub fn summarize(cells: &[CellResult]) -> Result<Summary> {
    let first = cells
        .first()
        .ok_or_else(|| Error::InvalidValue("no results to summarize".into()))?;
    if let Some(c) = cells.iter().find(|c| c.config_digest != first.config_digest) {
        return Err(Error::Config(format!(
            "results from different configurations: {} vs {}",
            first.config_digest, c.config_digest
        )));
    }
    let mut sorted = cells.to_vec();
    sorted.sort_by(|a, b| (a.mode, a.seed).cmp(&(b.mode, b.seed)));
    if let Some(w) = sorted.windows(2).find(|w| (w[0].mode, w[0].seed) == (w[1].mode, w[1].seed)) {
        return Err(Error::InvalidValue(format!(
            "duplicate result for mode {} seed {}",
            w[0].mode, w[0].seed
        )));
    }

    let mut groups: BTreeMap<TrainingMode, Vec<&CellResult>> = BTreeMap::new();
    for c in &sorted {
        groups.entry(c.mode).or_default().push(c);
    }
    let modes = groups
        .into_iter()
        .map(|(mode, rows)| {
            let col = |f: fn(&CellResult) -> f64| MeanStd::of(&rows.iter().map(|c| f(c)).collect::<Vec<_>>()).unwrap();
            let d1: Vec<f64> = rows.iter().filter_map(|c| c.dice1).collect();
            ModeSummary {
                mode,
                seeds: rows.iter().map(|c| c.seed).collect(),
                dice1: MeanStd::of(&d1),
                dice2: col(|c| c.dice2),
                success: col(|c| c.success),
                acc: col(|c| c.acc),
            }
        })
        .collect();
    Ok(Summary {
        config_digest: first.config_digest.clone(),
        cells: sorted,
        modes,
    })
}

fn pct(m: &MeanStd) -> String {
    format!("{:.0} ± {:.0}", m.mean * 100.0, m.std * 100.0)
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl Summary {
    pub fn mode(&self, mode: TrainingMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Table of percentages, mean ± sample std over seeds.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| mode | seeds | Dice1 | Dice2 | Success | ACC |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for m in &self.modes {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                m.mode,
                m.seeds.len(),
                m.dice1.as_ref().map(pct).unwrap_or_else(|| "n/a".into()),
                pct(&m.dice2),
                pct(&m.success),
                pct(&m.acc)
            );
        }
        let _ = writeln!(s, "\nconfig digest: `{}`", self.config_digest);
        s
    }

    /// One row per cell and one aggregate row per mode, at full precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,seed,dice1,dice2,success,acc,config_digest\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{:?},{:?},{:?},{}",
                c.mode,
                c.seed,
                num(c.dice1),
                c.dice2,
                c.success,
                c.acc,
                c.config_digest
            );
        }
        for m in &self.modes {
            for (stat, pick) in [("mean", 0usize), ("std", 1)] {
                let get = |v: &MeanStd| if pick == 0 { v.mean } else { v.std };
                let _ = writeln!(
                    s,
                    "{},{},{},{:?},{:?},{:?},{}",
                    m.mode,
                    stat,
                    num(m.dice1.as_ref().map(get)),
                    get(&m.dice2),
                    get(&m.success),
                    get(&m.acc),
                    self.config_digest
                );
            }
        }
        s
    }
}
