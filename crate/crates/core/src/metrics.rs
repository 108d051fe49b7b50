//! Displacement metrics and the per-horizon evaluation report.
//!
//! All metrics pool per-point Euclidean errors over the real channels of a
//! scene. With `N` real agents and horizon `T` frames:
//!
//! ```text
//! ADE  = sum_{n,t<=T} |p - y| / (N T)
//! FDE  = sum_n |p_T - y_T| / N
//! RMSE = sqrt(sum_{n,t<=T} |p - y|^2 / (N T))
//! ```

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SegmentSample;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{Scalar, Tensor};

/// Frames per second of the prediction stream.
pub const FRAMES_PER_SECOND: usize = 5;
pub const REPORT_HORIZONS_S: [usize; 5] = [1, 2, 3, 4, 5];

/// How squared error is formed for RMSE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseMode {
    /// Squared Euclidean distance per point.
    #[default]
    Euclidean,
    /// Mean of the two squared coordinate errors per point.
    PerCoordinate,
}

/// Published 5-second figures, shown next to measured rows for comparison only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub horizon_s: usize,
    pub ade: f64,
    pub fde: f64,
    pub rmse: f64,
}

pub const REFERENCE_5S: ReferenceRow = ReferenceRow {
    horizon_s: 5,
    ade: 1.90,
    fde: 4.66,
    rmse: 3.16,
};

fn check_inputs(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool], horizon: usize) -> Result<usize> {
    if pred.shape() != gt.shape() || pred.rank() != 3 || pred.shape()[2] != 2 {
        return Err(Error::shape("metric", pred.shape(), gt.shape()));
    }
    if mask.len() != pred.shape()[0] {
        return Err(Error::shape("metric mask", &[mask.len()], &pred.shape()[..1]));
    }
    if horizon == 0 || horizon > pred.shape()[1] {
        return Err(Error::Usage(format!(
            "horizon {horizon} frames outside 1..={}",
            pred.shape()[1]
        )));
    }
    let real = mask.iter().filter(|&&m| m).count();
    if real == 0 {
        return Err(Error::Data("no real agent channel to evaluate".into()));
    }
    Ok(real)
}

fn point_error(pred: &Tensor<f64>, gt: &Tensor<f64>, n: usize, t: usize) -> [f64; 2] {
    let frames = pred.shape()[1];
    let i = (n * frames + t) * 2;
    [pred.data()[i] - gt.data()[i], pred.data()[i + 1] - gt.data()[i + 1]]
}

fn real_channels(mask: &[bool]) -> impl Iterator<Item = usize> + '_ {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(n, _)| n)
}

/// Average displacement over frames `1..=horizon`.
pub fn ade(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool], horizon: usize) -> Result<f64> {
    let real = check_inputs(pred, gt, mask, horizon)?;
    let total: f64 = real_channels(mask)
        .flat_map(|n| (0..horizon).map(move |t| (n, t)))
        .map(|(n, t)| {
            let [dx, dy] = point_error(pred, gt, n, t);
            dx.hypot(dy)
        })
        .sum();
    Ok(total / (real * horizon) as f64)
}

/// Displacement at frame `horizon` only.
pub fn fde(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool], horizon: usize) -> Result<f64> {
    let real = check_inputs(pred, gt, mask, horizon)?;
    let total: f64 = real_channels(mask)
        .map(|n| {
            let [dx, dy] = point_error(pred, gt, n, horizon - 1);
            dx.hypot(dy)
        })
        .sum();
    Ok(total / real as f64)
}

pub fn rmse(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool], horizon: usize) -> Result<f64> {
    rmse_with(pred, gt, mask, horizon, RmseMode::Euclidean)
}

pub fn rmse_with(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool], horizon: usize, mode: RmseMode) -> Result<f64> {
    let real = check_inputs(pred, gt, mask, horizon)?;
    let total: f64 = real_channels(mask)
        .flat_map(|n| (0..horizon).map(move |t| (n, t)))
        .map(|(n, t)| {
            let [dx, dy] = point_error(pred, gt, n, t);
            squared(dx, dy, mode)
        })
        .sum();
    Ok((total / (real * horizon) as f64).sqrt())
}

fn squared(dx: f64, dy: f64, mode: RmseMode) -> f64 {
    match mode {
        RmseMode::Euclidean => dx * dx + dy * dy,
        RmseMode::PerCoordinate => 0.5 * (dx * dx + dy * dy),
    }
}

/// Per-frame error sums pooled over many scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricAccumulator {
    dist: Vec<f64>,
    sq: Vec<f64>,
    agents: usize,
    mode: RmseMode,
}

impl MetricAccumulator {
    pub fn new(frames: usize, mode: RmseMode) -> Self {
        MetricAccumulator {
            dist: vec![0.0; frames],
            sq: vec![0.0; frames],
            agents: 0,
            mode,
        }
    }

    pub fn add(&mut self, pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool]) -> Result<()> {
        let frames = self.dist.len();
        check_inputs(pred, gt, mask, frames)?;
        if pred.shape()[1] != frames {
            return Err(Error::shape("accumulate", pred.shape(), &[0, frames, 2]));
        }
        for n in real_channels(mask) {
            for t in 0..frames {
                let [dx, dy] = point_error(pred, gt, n, t);
                self.dist[t] += dx.hypot(dy);
                self.sq[t] += squared(dx, dy, self.mode);
            }
            self.agents += 1;
        }
        Ok(())
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// `(ade, fde, rmse)` over frames `1..=horizon`.
    pub fn at(&self, horizon: usize) -> Result<(f64, f64, f64)> {
        if horizon == 0 || horizon > self.dist.len() {
            return Err(Error::Usage(format!("horizon {horizon} frames outside 1..={}", self.dist.len())));
        }
        if self.agents == 0 {
            return Err(Error::Data("no real agent channel accumulated".into()));
        }
        let denom = (self.agents * horizon) as f64;
        let ade = self.dist[..horizon].iter().sum::<f64>() / denom;
        let fde = self.dist[horizon - 1] / self.agents as f64;
        let rmse = (self.sq[..horizon].iter().sum::<f64>() / denom).sqrt();
        Ok((ade, fde, rmse))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon_s: usize,
    pub frames: usize,
    pub ade: f64,
    pub fde: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<HorizonRow>,
    pub fingerprint: String,
    pub samples: usize,
    pub agents: usize,
    pub reference: ReferenceRow,
}

/// Short stable hash of a model configuration.
pub fn config_fingerprint(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Horizons (seconds, frames) reportable for a prediction length. Falls back
/// to a single row at the full length when it is shorter than one second.
pub fn report_horizons(pred_len: usize) -> Vec<(usize, usize)> {
    let rows: Vec<(usize, usize)> = REPORT_HORIZONS_S
        .iter()
        .map(|&s| (s, s * FRAMES_PER_SECOND))
        .filter(|&(_, f)| f <= pred_len)
        .collect();
    if rows.is_empty() {
        vec![(0, pred_len)]
    } else {
        rows
    }
}

impl MetricsReport {
    pub fn from_accumulator(acc: &MetricAccumulator, config: &ModelConfig, samples: usize) -> Result<Self> {
        let rows = report_horizons(acc.dist.len())
            .into_iter()
            .map(|(horizon_s, frames)| {
                let (ade, fde, rmse) = acc.at(frames)?;
                Ok(HorizonRow {
                    horizon_s,
                    frames,
                    ade,
                    fde,
                    rmse,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsReport {
            rows,
            fingerprint: config_fingerprint(config),
            samples,
            agents: acc.agents,
            reference: REFERENCE_5S,
        })
    }

    /// Every entry is finite and non-negative.
    pub fn is_valid(&self) -> bool {
        !self.rows.is_empty()
            && self
                .rows
                .iter()
                .all(|r| [r.ade, r.fde, r.rmse].iter().all(|v| v.is_finite() && *v >= 0.0))
    }

    /// Comma-separated table. The last row carries the published reference
    /// figures and is labelled as such in the `source` column.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# config_fingerprint={} samples={} agents={}\nsource,horizon_s,frames,ade_m,fde_m,rmse_m\n",
            self.fingerprint, self.samples, self.agents
        );
        for r in &self.rows {
            out += &format!(
                "measured,{},{},{:.6},{:.6},{:.6}\n",
                r.horizon_s, r.frames, r.ade, r.fde, r.rmse
            );
        }
        let rf = &self.reference;
        out += &format!(
            "reference (published; not asserted),{},{},{:.2},{:.2},{:.2}\n",
            rf.horizon_s,
            rf.horizon_s * FRAMES_PER_SECOND,
            rf.ade,
            rf.fde,
            rf.rmse
        );
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "horizon", "ADE(m)", "FDE(m)", "RMSE(m)")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>8.3} {:>8.3} {:>8.3}",
                format!("{} s", r.horizon_s),
                r.ade,
                r.fde,
                r.rmse
            )?;
        }
        let rf = &self.reference;
        writeln!(
            f,
            "{:<10} {:>8.2} {:>8.2} {:>8.2}   <- published reference, not asserted",
            format!("ref {} s", rf.horizon_s),
            rf.ade,
            rf.fde,
            rf.rmse
        )?;
        write!(f, "samples={} agents={} config={}", self.samples, self.agents, self.fingerprint)
    }
}

/// Autoregressive prediction for one sample, in the source coordinate frame,
/// alongside the matching ground truth.
pub fn predict_denormalized<T: Scalar>(model: &Model<T>, sample: &SegmentSample) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let scene = &sample.scene;
    let pred = model.predict(scene)?.cast::<f64>();
    let gt = model.ground_truth(scene)?.cast::<f64>();
    Ok((scene.denormalize_points(&pred)?, scene.denormalize_points(&gt)?))
}

/// Runs `predict` on every test segment and reports pooled metrics.
pub fn evaluate<T: Scalar>(model: &Model<T>, test: &[SegmentSample], mode: RmseMode) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let cfg = model.config();
    let pairs: Vec<(Tensor<f64>, Tensor<f64>)> = test
        .par_iter()
        .map(|s| predict_denormalized(model, s))
        .collect::<Result<_>>()?;
    let mut acc = MetricAccumulator::new(cfg.pred_len, mode);
    for ((pred, gt), sample) in pairs.iter().zip(test) {
        acc.add(pred, gt, sample.scene.channel_mask())?;
    }
    MetricsReport::from_accumulator(&acc, cfg, test.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn three_four_five() {
        let pred = t(&[1, 2, 2], &[3.0, 4.0, 0.0, 0.0]);
        let gt = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert_eq!(ade(&pred, &gt, &[true], 2).unwrap(), 2.5);
        let pred_last = t(&[1, 2, 2], &[0.0, 0.0, 3.0, 4.0]);
        assert_eq!(fde(&pred_last, &gt, &[true], 2).unwrap(), 5.0);
        let one = t(&[1, 1, 2], &[3.0, 4.0]);
        let zero = Tensor::zeros(&[1, 1, 2]).unwrap();
        assert_eq!(rmse(&one, &zero, &[true], 1).unwrap(), 5.0);
        let per = rmse_with(&one, &zero, &[true], 1, RmseMode::PerCoordinate).unwrap();
        assert!((per - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn masked_channels_are_ignored() {
        let pred = t(&[2, 1, 2], &[3.0, 4.0, 100.0, 100.0]);
        let gt = Tensor::zeros(&[2, 1, 2]).unwrap();
        assert_eq!(ade(&pred, &gt, &[true, false], 1).unwrap(), 5.0);
        assert!(matches!(ade(&pred, &gt, &[false, false], 1), Err(Error::Data(_))));
    }

    #[test]
    fn zero_horizon_is_usage_error() {
        let z = Tensor::zeros(&[1, 3, 2]).unwrap();
        for r in [
            ade(&z, &z, &[true], 0),
            fde(&z, &z, &[true], 0),
            rmse(&z, &z, &[true], 0),
            ade(&z, &z, &[true], 4),
        ] {
            assert!(matches!(r, Err(Error::Usage(_))));
        }
    }

    #[test]
    fn accumulator_matches_direct_metrics() {
        let pred = Tensor::from_fn(&[3, 5, 2], |i| (i as f64 * 0.7).sin() * 3.0).unwrap();
        let gt = Tensor::from_fn(&[3, 5, 2], |i| (i as f64 * 0.3).cos()).unwrap();
        let mask = [true, false, true];
        let mut acc = MetricAccumulator::new(5, RmseMode::Euclidean);
        acc.add(&pred, &gt, &mask).unwrap();
        for h in 1..=5 {
            let (a, f, r) = acc.at(h).unwrap();
            assert!((a - ade(&pred, &gt, &mask, h).unwrap()).abs() < 1e-12);
            assert!((f - fde(&pred, &gt, &mask, h).unwrap()).abs() < 1e-12);
            assert!((r - rmse(&pred, &gt, &mask, h).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn horizon_rows() {
        assert_eq!(report_horizons(25).len(), 5);
        assert_eq!(report_horizons(25)[4], (5, 25));
        assert_eq!(report_horizons(12), [(1, 5), (2, 10)]);
        assert_eq!(report_horizons(3), [(0, 3)]);
    }

    #[test]
    fn csv_labels_reference_row() {
        let mut acc = MetricAccumulator::new(25, RmseMode::Euclidean);
        let z = Tensor::zeros(&[1, 25, 2]).unwrap();
        acc.add(&z, &z, &[true]).unwrap();
        let report = MetricsReport::from_accumulator(&acc, &ModelConfig::desk(1), 1).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2 + 5 + 1);
        assert!(lines[7].starts_with("reference"));
        assert!(lines[7].ends_with("1.90,4.66,3.16"));
        assert!(report.is_valid());
    }
}
