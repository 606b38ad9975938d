//! Ablation grids: branch configuration, noise mechanism and timestep shift.
//! Every cell trains with the same seed and data and is scored on the test
//! split with its best checkpoint.

use std::fmt;
use std::str::FromStr;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forgegen::{Dataset, Split};
use crate::harness::checkpoint::load_checkpoint;
use crate::harness::config::{BranchMode, ExperimentConfig};
use crate::harness::eval::{evaluate, EvalOptions};
use crate::harness::train::train;
use crate::metrics::MetricReport;
use crate::noise_schedule::NoiseMechanism;

pub const SHIFT_GRID: [f64; 5] = [0.5, 1.0, 3.0, 4.0, 6.0];

/// `(sd, sam)` rows of the component table, in table order.
pub const COMPONENT_ROWS: [(BranchMode, BranchMode); 5] = [
    (BranchMode::Tuned, BranchMode::Frozen),
    (BranchMode::Tuned, BranchMode::Removed),
    (BranchMode::Removed, BranchMode::Tuned),
    (BranchMode::Frozen, BranchMode::Tuned),
    (BranchMode::Tuned, BranchMode::Tuned),
];

pub const NOISE_ROWS: [NoiseMechanism; 3] = [NoiseMechanism::Zero, NoiseMechanism::Ddpm, NoiseMechanism::Rf];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Components,
    Noise,
    Shift,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [Self::Components, Self::Noise, Self::Shift];

    pub fn name(self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::Noise => "noise",
            Self::Shift => "shift",
        }
    }

    pub fn columns(self) -> Vec<String> {
        match self {
            Self::Components => vec!["sd".into(), "sam".into()],
            Self::Noise => vec!["noise".into()],
            Self::Shift => vec!["shift_s".into()],
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis '{s}' (components, noise or shift)")))
    }
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub labels: Vec<String>,
    pub cfg: ExperimentConfig,
}

/// The configurations of one axis, derived from `base`.
pub fn ablation_grid(axis: AblationAxis, base: &ExperimentConfig) -> Result<Vec<AblationCell>> {
    let dir = base.output_dir.join("ablate").join(axis.name());
    let cells: Vec<(Vec<String>, String, ExperimentConfig)> = match axis {
        AblationAxis::Components => COMPONENT_ROWS
            .iter()
            .map(|&(sd, sam)| {
                let mut cfg = base.clone();
                cfg.branches.sd = sd;
                cfg.branches.sam = sam;
                (vec![sd.symbol().into(), sam.symbol().into()], format!("sd-{sd}_sam-{sam}"), cfg)
            })
            .collect(),
        AblationAxis::Noise => NOISE_ROWS
            .iter()
            .map(|&m| {
                let mut cfg = base.clone();
                cfg.noise.mechanism = m;
                (vec![m.label().into()], format!("{m:?}").to_lowercase(), cfg)
            })
            .collect(),
        AblationAxis::Shift => SHIFT_GRID
            .iter()
            .map(|&s| {
                let mut cfg = base.clone();
                cfg.noise.mechanism = NoiseMechanism::Rf;
                cfg.noise.shift_s = s;
                (vec![format!("{s:.1}")], format!("shift-{s:.1}"), cfg)
            })
            .collect(),
    };
    cells
        .into_iter()
        .map(|(labels, slug, mut cfg)| {
            cfg.output_dir = dir.join(slug);
            cfg.validate()?;
            Ok(AblationCell { labels, cfg })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub labels: Vec<String>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Config columns, then `<group>_f1,<group>_iou` per group, then the
    /// image-weighted `all_f1,all_iou`.
    pub fn to_csv(&self) -> String {
        let groups: Vec<String> =
            self.rows.first().map(|r| r.report.datasets.iter().map(|d| d.name.clone()).collect()).unwrap_or_default();
        let mut header = self.columns.clone();
        for g in &groups {
            header.push(format!("{g}_f1"));
            header.push(format!("{g}_iou"));
        }
        header.extend(["all_f1".to_string(), "all_iou".to_string()]);
        let mut s = header.join(",") + "\n";
        for row in &self.rows {
            let mut cells = row.labels.clone();
            for g in &groups {
                match row.report.datasets.iter().find(|d| &d.name == g) {
                    Some(d) => cells.extend([format!("{:.6}", d.f1), format!("{:.6}", d.iou)]),
                    None => cells.extend([String::new(), String::new()]),
                }
            }
            cells.extend([format!("{:.6}", row.report.weighted_f1), format!("{:.6}", row.report.weighted_iou)]);
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Row labels from best to worst overall F1 (stable on ties).
    pub fn ranking(&self) -> Vec<String> {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| {
            self.rows[b]
                .report
                .weighted_f1
                .partial_cmp(&self.rows[a].report.weighted_f1)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        idx.into_iter().map(|i| self.rows[i].labels.join("/")).collect()
    }
}

/// Trains and scores every cell of `axis`.
pub fn run_ablation(axis: AblationAxis, base: &ExperimentConfig, dataset: &Dataset) -> Result<AblationTable> {
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Config("ablation needs a test split".into()));
    }
    let mut rows = Vec::new();
    for cell in ablation_grid(axis, base)? {
        let outcome = train(&cell.cfg, dataset)?;
        let restored = load_checkpoint(&outcome.best_checkpoint, Some(&cell.cfg), &Device::Cpu)?;
        let opts = EvalOptions {
            threshold: cell.cfg.train.threshold,
            batch_size: cell.cfg.train.batch_size,
            ..Default::default()
        };
        let report = evaluate(&restored.model, &test, &opts)?.report;
        rows.push(AblationRow { labels: cell.labels, report });
    }
    Ok(AblationTable { axis, columns: axis.columns(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_table_row_structure() {
        let base = ExperimentConfig::default();
        let comp = ablation_grid(AblationAxis::Components, &base).unwrap();
        let labels: Vec<String> = comp.iter().map(|c| c.labels.join("")).collect();
        assert_eq!(labels, ["✓–", "✓×", "×✓", "–✓", "✓✓"]);
        let noise = ablation_grid(AblationAxis::Noise, &base).unwrap();
        let labels: Vec<&str> = noise.iter().map(|c| c.labels[0].as_str()).collect();
        assert_eq!(labels, ["Zero Noise", "DDPM Noise", "Rectified Flow Noise"]);
        let shift = ablation_grid(AblationAxis::Shift, &base).unwrap();
        let s: Vec<f64> = shift.iter().map(|c| c.cfg.noise.shift_s).collect();
        assert_eq!(s, SHIFT_GRID);
        let mut dirs: Vec<_> = comp.iter().chain(&noise).chain(&shift).map(|c| c.cfg.output_dir.clone()).collect();
        dirs.sort();
        dirs.dedup();
        assert_eq!(dirs.len(), 13);
    }
}
