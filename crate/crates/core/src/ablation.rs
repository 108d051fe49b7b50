//! Neighbor-count by SE-toggle ablation grid.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::data::{DatasetSplit, SegmentSample};
use crate::error::{Error, ErrorKind, Result};
use crate::metrics::{evaluate, MetricsReport, RmseMode};
use crate::model::{Model, ModelConfig};
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub neighbors: Vec<usize>,
    pub se: Vec<bool>,
    /// Model settings shared by every cell; `agents` and `use_se` are overridden.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rmse_mode: RmseMode,
    /// Cells that would start after this much wall time fail with a budget error.
    pub budget: Option<Duration>,
}

impl AblationConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        AblationConfig {
            neighbors: vec![5, 10, 15],
            se: vec![true, false],
            model,
            train,
            rmse_mode: RmseMode::Euclidean,
            budget: None,
        }
    }
}

/// One-line description of a failed cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellError {
    pub kind: &'static str,
    pub message: String,
}

impl From<Error> for CellError {
    fn from(e: Error) -> Self {
        CellError {
            kind: match e.kind() {
                ErrorKind::Usage => "usage",
                ErrorKind::Data => "data",
                ErrorKind::Numeric => "numeric",
            },
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub neighbors: usize,
    pub se: bool,
    pub result: std::result::Result<MetricsReport, CellError>,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("N{}_{}", self.neighbors, if self.se { "se" } else { "no_se" })
    }
}

/// Published figure shown beside the grid for comparison only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceCell {
    pub neighbors: usize,
    pub se: bool,
    pub horizon_s: usize,
    pub ade: f64,
    pub fde: f64,
}

pub const REFERENCE_CELL: ReferenceCell = ReferenceCell {
    neighbors: 10,
    se: true,
    horizon_s: 5,
    ade: 1.90,
    fde: 4.66,
};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub reference: ReferenceCell,
}

fn with_channels(samples: &[SegmentSample], n: usize) -> Result<Vec<SegmentSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(SegmentSample {
                scene: s.scene.with_channels(n)?,
                source: s.source.clone(),
            })
        })
        .collect()
}

fn run_cell(cfg: &AblationConfig, data: &DatasetSplit, neighbors: usize, se: bool) -> Result<MetricsReport> {
    let model_cfg = ModelConfig {
        agents: neighbors,
        use_se: se,
        ..cfg.model.clone()
    };
    let model = Model::<f32>::new(model_cfg)?;
    let train_set = with_channels(&data.train, neighbors)?;
    let val_set = with_channels(&data.val, neighbors)?;
    let test_set = with_channels(&data.test, neighbors)?;
    let outcome = train(model, &train_set, &val_set, &cfg.train)?;
    evaluate(&outcome.best, &test_set, cfg.rmse_mode)
}

/// Trains and evaluates every `(neighbors, se)` cell. A failing cell is
/// recorded and the remaining cells still run.
pub fn ablate(cfg: &AblationConfig, data: &DatasetSplit) -> Result<AblationReport> {
    if cfg.neighbors.is_empty() || cfg.se.is_empty() {
        return Err(Error::Config("ablation needs at least one neighbor count and one SE setting".into()));
    }
    let started = Instant::now();
    let mut cells = Vec::with_capacity(cfg.neighbors.len() * cfg.se.len());
    for &neighbors in &cfg.neighbors {
        for &se in &cfg.se {
            let result = match cfg.budget {
                Some(b) if started.elapsed() >= b => Err(CellError {
                    kind: "usage",
                    message: format!("time budget of {:.0} s exhausted before this cell", b.as_secs_f64()),
                }),
                _ => run_cell(cfg, data, neighbors, se).map_err(CellError::from),
            };
            cells.push(AblationCell { neighbors, se, result });
        }
    }
    Ok(AblationReport {
        cells,
        reference: REFERENCE_CELL,
    })
}

impl AblationReport {
    fn twin(&self, cell: &AblationCell) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.neighbors == cell.neighbors && !c.se)
    }

    /// Wide table: one row per (horizon, metric), one column per cell.
    /// Failed cells show `error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon_s,metric");
        for c in &self.cells {
            out += &format!(",{}", c.label());
        }
        out.push('\n');
        let horizons: Vec<(usize, usize)> = self
            .cells
            .iter()
            .find_map(|c| c.result.as_ref().ok())
            .map(|r| r.rows.iter().map(|h| (h.horizon_s, h.frames)).collect())
            .unwrap_or_default();
        for (i, (h, _)) in horizons.iter().enumerate() {
            for metric in ["ade", "fde", "rmse"] {
                let _ = write!(out, "{h},{metric}");
                for c in &self.cells {
                    match &c.result {
                        Ok(r) => {
                            let row = &r.rows[i];
                            let v = match metric {
                                "ade" => row.ade,
                                "fde" => row.fde,
                                _ => row.rmse,
                            };
                            let _ = write!(out, ",{v:.6}");
                        }
                        Err(_) => out += ",error",
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// Differences of each SE-on cell against its SE-off twin at every
    /// horizon (`on - off`; negative means SE helped).
    pub fn deltas_csv(&self) -> String {
        let mut out = String::from("neighbors,horizon_s,delta_ade,delta_fde,delta_rmse\n");
        for c in self.cells.iter().filter(|c| c.se) {
            let (Ok(on), Some(Ok(off))) = (&c.result, self.twin(c).map(|t| &t.result)) else {
                let _ = writeln!(out, "{},all,n/a,n/a,n/a", c.neighbors);
                continue;
            };
            for (a, b) in on.rows.iter().zip(&off.rows) {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6}",
                    c.neighbors,
                    a.horizon_s,
                    a.ade - b.ade,
                    a.fde - b.fde,
                    a.rmse - b.rmse
                );
            }
        }
        out
    }

    pub fn errors_csv(&self) -> String {
        let mut out = String::from("cell,kind,message\n");
        for c in &self.cells {
            if let Err(e) = &c.result {
                let _ = writeln!(out, "{},{},\"{}\"", c.label(), e.kind, e.message.replace('"', "'"));
            }
        }
        out
    }

    pub fn reference_line(&self) -> String {
        let r = &self.reference;
        format!(
            "reference (published; not asserted): neighbors={} se={} {} s ADE/FDE = {:.2}/{:.2}",
            r.neighbors,
            if r.se { "on" } else { "off" },
            r.horizon_s,
            r.ade,
            r.fde
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_mixed, SplitFractions, SynthOptions};
    use crate::train::AdamConfig;

    #[test]
    fn failing_cell_does_not_abort_grid() {
        let opts = SynthOptions {
            agents: 4,
            vehicles: 4,
            frames: 7,
            obs_len: 4,
            ..SynthOptions::default()
        };
        let data = DatasetSplit::new(synthesize_mixed(6, 2, &opts).unwrap(), SplitFractions::default(), 0).unwrap();
        let mut cfg = AblationConfig::new(
            ModelConfig::toy(),
            TrainConfig {
                epochs: 1,
                batch_size: 4,
                adam: AdamConfig::default(),
                ..TrainConfig::default()
            },
        );
        cfg.neighbors = vec![0, 3];
        let report = ablate(&cfg, &data).unwrap();
        assert_eq!(report.cells.len(), 4);
        assert!(report.cells[0].result.is_err() && report.cells[1].result.is_err());
        assert!(report.cells[2].result.as_ref().unwrap().is_valid());
        assert!(report.cells[3].result.is_ok());
        let csv = report.to_csv();
        assert!(csv.lines().next().unwrap().ends_with("N3_no_se"));
        assert!(csv.contains(",error,"));
        assert_eq!(report.deltas_csv().lines().count(), 1 + 1 + 1);
        assert_eq!(report.errors_csv().lines().count(), 3);
    }
}
