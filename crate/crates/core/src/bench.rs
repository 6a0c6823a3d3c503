//! Scoring helpers and the sweep harness (accuracy vs noise level, input
//! resolution and sampling rate), with CSV and plot-script reports.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{generate, resample_with_truth, GroundTruth, SyntheticConfig};
use crate::detector::{
    detect, detect_at, detect_dvt, detect_mae, DetectorKind, DetectorParams, EventFormationConfig, SpikeEventList,
    WARMUP_SAMPLES,
};
use crate::error::{Error, Result};
use crate::hw::{hw_detect_channel, HwConfig};
use crate::metrics::{accuracy, match_events, MatchReport};
use crate::signal::{dequantize, quantize, quantize_normalized, FixedPointFormat, QuantizedRecord, SignalRecord};
use crate::threshold::ThresholdCoefficients;

/// Noise level at which the resolution and rate sweeps are run.
pub const FIXED_SWEEP_NOISE: f64 = 0.1;

/// How detections are scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Matching window, ± seconds.
    pub tolerance_s: f64,
    /// Ground truth and detections before this sample are not scored (the
    /// adaptive threshold is still seeding there).
    pub settle_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance_s: 0.001,
            settle_samples: WARMUP_SAMPLES,
        }
    }
}

impl EvalConfig {
    pub fn tolerance_samples(&self, rate_hz: f64) -> usize {
        (self.tolerance_s * rate_hz).round() as usize
    }

    /// Truth indices inside the scored region.
    pub fn scored_truth(&self, truth: &GroundTruth) -> Vec<usize> {
        truth
            .spike_indices
            .iter()
            .copied()
            .filter(|&k| k >= self.settle_samples)
            .collect()
    }

    pub fn score_indices(&self, detected: &[usize], truth: &[usize], rate_hz: f64) -> MatchReport {
        let det: Vec<usize> = detected.iter().copied().filter(|&k| k >= self.settle_samples).collect();
        let tru: Vec<usize> = truth.iter().copied().filter(|&k| k >= self.settle_samples).collect();
        match_events(&det, &tru, self.tolerance_samples(rate_hz))
    }

    pub fn score(&self, events: &SpikeEventList, truth: &GroundTruth, rate_hz: f64) -> MatchReport {
        self.score_indices(&events.indices(), &truth.spike_indices, rate_hz)
    }
}

/// Resample to the datapath rate and quantize (per-record full scale) to
/// its input width.
pub fn to_hw_input(record: &SignalRecord, truth: &GroundTruth, cfg: &HwConfig) -> Result<(QuantizedRecord, GroundTruth)> {
    let (r, t) = resample_with_truth(record, truth, cfg.rate_hz)?;
    let q = quantize_normalized(&r, FixedPointFormat::signed(cfg.input_bits)?)?;
    Ok((q, t))
}

/// Reduce a record to `bits` of resolution (per-record full scale) with
/// round-to-nearest: half an LSB is added ahead of the floor quantizer.
pub fn requantize(record: &SignalRecord, bits: u32) -> Result<SignalRecord> {
    let format = FixedPointFormat::signed(bits)?;
    let m = record.max_abs();
    let full_scale = if m > 0.0 { m } else { 1.0 };
    let half = 0.5 * full_scale / format.scale() as f64;
    let shifted = SignalRecord::new(
        record.samples().iter().map(|v| v + half).collect(),
        record.rate_hz(),
        record.channel_id(),
    )?;
    Ok(dequantize(&quantize(&shifted, format, full_scale)?))
}

/// A detector as evaluated by the harness: one of the floating-point
/// detectors, or the fixed-point dual datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Float(DetectorKind),
    DualHw,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Float(k) => k.name(),
            Method::DualHw => "DUAL_HW",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("DUAL_HW") || s.eq_ignore_ascii_case("dual-hw") {
            Ok(Method::DualHw)
        } else {
            s.parse().map(Method::Float)
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to run any [`Method`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodParams {
    pub float: DetectorParams,
    pub hw: HwConfig,
    pub hw_coeffs: ThresholdCoefficients,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            float: DetectorParams::default(),
            hw: HwConfig::default(),
            hw_coeffs: ThresholdCoefficients::default_hw(),
        }
    }
}

/// Run a method on a record and score it.
pub fn evaluate(
    method: Method,
    record: &SignalRecord,
    truth: &GroundTruth,
    params: &MethodParams,
    eval: &EvalConfig,
) -> Result<MatchReport> {
    match method {
        Method::Float(kind) => {
            let cfg = EventFormationConfig::for_rate(record.rate_hz());
            let events = detect(kind, record, &params.float, &cfg);
            Ok(eval.score(&events, truth, record.rate_hz()))
        }
        Method::DualHw => {
            let (q, t) = to_hw_input(record, truth, &params.hw)?;
            let cfg = EventFormationConfig::for_rate(params.hw.rate_hz);
            let events = hw_detect_channel(&q, &params.hw, &params.hw_coeffs, &cfg)?;
            Ok(eval.score(&events, &t, params.hw.rate_hz))
        }
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NoiseLevel,
    ResolutionBits,
    RateHz,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::NoiseLevel => "noise_level",
            SweepAxis::ResolutionBits => "resolution_bits",
            SweepAxis::RateHz => "rate_hz",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_level" => Ok(SweepAxis::NoiseLevel),
            "resolution_bits" => Ok(SweepAxis::ResolutionBits),
            "rate_hz" => Ok(SweepAxis::RateHz),
            other => Err(Error::invalid(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub points: Vec<f64>,
    pub detectors: Vec<Method>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub base_cfg: SyntheticConfig,
}

fn default_replicates() -> usize {
    10
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::invalid("a sweep needs at least two points"));
        }
        if self.points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sweep points must be strictly increasing"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be >= 1"));
        }
        if self.detectors.is_empty() {
            return Err(Error::invalid("no detectors selected"));
        }
        match self.axis {
            SweepAxis::NoiseLevel => {
                if self.points.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::invalid("noise levels must be >= 0"));
                }
            }
            SweepAxis::ResolutionBits => {
                if self.points.iter().any(|p| p.fract() != 0.0 || !(2.0..=16.0).contains(p)) {
                    return Err(Error::invalid("resolution points must be integers in 2..=16"));
                }
                if self.detectors.contains(&Method::DualHw) {
                    return Err(Error::invalid("DUAL_HW has a fixed input width; use DUAL for resolution sweeps"));
                }
            }
            SweepAxis::RateHz => {
                if self.points.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                    return Err(Error::invalid("rates must be positive"));
                }
            }
        }
        self.base_cfg.validate()
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            Error::parse(origin, line, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub axis: SweepAxis,
    pub point: f64,
    pub detector: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub replicates: usize,
}

/// Seed of replicate `r`; shared by every point and detector so that cells
/// differ only in the swept parameter.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    base.wrapping_add(r as u64)
}

/// The record a sweep cell is evaluated on.
pub fn sweep_input(axis: SweepAxis, point: f64, base: &SyntheticConfig, r: usize) -> Result<(SignalRecord, GroundTruth)> {
    let mut cfg = base.clone();
    cfg.seed = replicate_seed(base.seed, r);
    match axis {
        SweepAxis::NoiseLevel => {
            cfg.noise_level = point;
            generate(&cfg)
        }
        SweepAxis::ResolutionBits => {
            cfg.noise_level = FIXED_SWEEP_NOISE;
            let (rec, truth) = generate(&cfg)?;
            Ok((requantize(&rec, point as u32)?, truth))
        }
        SweepAxis::RateHz => {
            cfg.noise_level = FIXED_SWEEP_NOISE;
            let (rec, truth) = generate(&cfg)?;
            resample_with_truth(&rec, &truth, point)
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub fn sweep(spec: &SweepSpec, params: &MethodParams, eval: &EvalConfig) -> Result<Vec<SweepCell>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.points.len())
        .flat_map(|p| (0..spec.replicates).map(move |r| (p, r)))
        .collect();
    // accuracies[job][detector]
    let accuracies: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let point = spec.points[p];
            let ctx = |m: &str| format!("{}={} replicate {r}{m}", spec.axis.name(), point);
            let (rec, truth) = sweep_input(spec.axis, point, &spec.base_cfg, r).map_err(|e| Error::Cell {
                cell: ctx(""),
                source: Box::new(e),
            })?;
            let mut mp = *params;
            if spec.axis == SweepAxis::RateHz {
                mp.hw.rate_hz = point;
            }
            spec.detectors
                .iter()
                .map(|&m| {
                    evaluate(m, &rec, &truth, &mp, eval)
                        .and_then(|rep| accuracy(&rep))
                        .map_err(|e| Error::Cell {
                            cell: ctx(&format!(" detector {m}")),
                            source: Box::new(e),
                        })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::with_capacity(spec.points.len() * spec.detectors.len());
    for (p, &point) in spec.points.iter().enumerate() {
        for (d, m) in spec.detectors.iter().enumerate() {
            let accs: Vec<f64> = (0..spec.replicates).map(|r| accuracies[p * spec.replicates + r][d]).collect();
            let (mean, std) = mean_std(&accs);
            cells.push(SweepCell {
                axis: spec.axis,
                point,
                detector: m.name().to_string(),
                mean_accuracy: mean,
                std_accuracy: std,
                replicates: spec.replicates,
            });
        }
    }
    Ok(cells)
}

/// Noise levels of the built-in training set.
pub const TRAINING_NOISE_LEVELS: [f64; 4] = [0.05, 0.1, 0.15, 0.2];
/// Seeds of the built-in training set, disjoint from the sweep seeds.
pub const TRAINING_SEEDS: [u64; 2] = [1000, 1001];
/// Duration of each training record in seconds.
pub const TRAINING_DURATION_S: f64 = 20.0;

/// Synthetic records used to calibrate the shipped coefficients and baseline multiples.
pub fn standard_training_set() -> Result<Vec<(SignalRecord, GroundTruth)>> {
    let cfgs: Vec<SyntheticConfig> = TRAINING_NOISE_LEVELS
        .iter()
        .flat_map(|&noise_level| {
            TRAINING_SEEDS.iter().map(move |&seed| SyntheticConfig {
                duration_s: TRAINING_DURATION_S,
                noise_level,
                seed,
                ..Default::default()
            })
        })
        .collect();
    cfgs.par_iter().map(generate).collect()
}

pub const RESULTS_HEADER: &str = "axis,point,detector,mean_accuracy,std_accuracy,replicates";

pub fn results_to_csv(cells: &[SweepCell]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.axis.name(),
            c.point,
            c.detector,
            c.mean_accuracy,
            c.std_accuracy,
            c.replicates
        ));
    }
    out
}

pub fn parse_results_csv(text: &str, origin: &Path) -> Result<Vec<SweepCell>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(Error::parse(origin, 1, format!("expected header {RESULTS_HEADER}"))),
    }
    let mut cells = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::parse(origin, i + 1, format!("invalid {what}"));
        if cols.len() != 6 {
            return Err(bad("column count"));
        }
        cells.push(SweepCell {
            axis: cols[0].parse().map_err(|_| bad("axis"))?,
            point: cols[1].parse().map_err(|_| bad("point"))?,
            detector: cols[2].to_string(),
            mean_accuracy: cols[3].parse().map_err(|_| bad("mean_accuracy"))?,
            std_accuracy: cols[4].parse().map_err(|_| bad("std_accuracy"))?,
            replicates: cols[5].parse().map_err(|_| bad("replicates"))?,
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    PlotScript,
}

/// Self-contained matplotlib script that plots `csv_name` (same directory).
pub fn plot_script(csv_name: &str) -> String {
    format!(
        r#"#!/usr/bin/env python3
"""Plot mean detection accuracy per detector from {csv_name}."""
import csv
import os
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
path = os.path.join(here, "{csv_name}")
series = defaultdict(list)
axis = None
with open(path) as f:
    for row in csv.DictReader(f):
        axis = row["axis"]
        series[row["detector"]].append(
            (float(row["point"]), 100 * float(row["mean_accuracy"]), 100 * float(row["std_accuracy"]))
        )

if axis is None:
    sys.exit("no rows in " + path)

fig, ax = plt.subplots(figsize=(4.5, 3.5))
for name, pts in sorted(series.items()):
    pts.sort()
    xs, ys, es = zip(*pts)
    ax.errorbar(xs, ys, yerr=es, marker="o", capsize=2, label=name)
ax.set_xlabel(axis.replace("_", " "))
ax.set_ylabel("mean detection accuracy (%)")
ax.grid(alpha=0.3)
ax.legend(fontsize=8)
fig.tight_layout()
out = os.path.splitext(path)[0] + ".png"
fig.savefig(out, dpi=150)
print("wrote", out)
"#
    )
}

pub fn report(cells: &[SweepCell], format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => results_to_csv(cells),
        ReportFormat::PlotScript => {
            let csv_name = path
                .with_extension("csv")
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "results.csv".into());
            plot_script(&csv_name)
        }
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Baseline calibration
// ---------------------------------------------------------------------------

/// Threshold multiples of the amplitude/energy baselines that maximize their
/// own mean accuracy on `corpus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineMultiples {
    pub at: f64,
    pub dvt_pos: f64,
    pub dvt_neg: f64,
    pub mae: f64,
}

fn argmax_mean(candidates: &[f64], score: impl Fn(f64) -> Result<f64> + Sync) -> Result<f64> {
    let scores: Vec<f64> = candidates.par_iter().map(|&c| score(c)).collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(candidates[best])
}

pub fn calibrate_baselines(
    corpus: &[(SignalRecord, GroundTruth)],
    eval: &EvalConfig,
    mae_window: usize,
) -> Result<BaselineMultiples> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty calibration corpus"));
    }
    let grid: Vec<f64> = (0..=64).map(|i| 2.0 + 0.125 * i as f64).collect();
    let mae_grid: Vec<f64> = (0..=80).map(|i| 4.0 + 0.5 * i as f64).collect();
    let mean_acc = |f: &(dyn Fn(&SignalRecord, &EventFormationConfig) -> SpikeEventList + Sync)| -> Result<f64> {
        let mut sum = 0.0;
        for (r, t) in corpus {
            let cfg = EventFormationConfig::for_rate(r.rate_hz());
            sum += accuracy(&eval.score(&f(r, &cfg), t, r.rate_hz()))?;
        }
        Ok(sum / corpus.len() as f64)
    };
    let at = argmax_mean(&grid, |m| mean_acc(&|r, c| detect_at(r, m, c)))?;
    // coordinate ascent from the symmetric optimum
    let mut dvt_neg = at;
    let mut dvt_pos = at;
    for _ in 0..2 {
        dvt_neg = argmax_mean(&grid, |m| mean_acc(&|r, c| detect_dvt(r, dvt_pos, m, c)))?;
        let mut pos_grid = grid.clone();
        pos_grid.push(f64::INFINITY);
        dvt_pos = argmax_mean(&pos_grid, |m| mean_acc(&|r, c| detect_dvt(r, m, dvt_neg, c)))?;
    }
    let mae = argmax_mean(&mae_grid, |m| mean_acc(&|r, c| detect_mae(r, mae_window, m, c)))?;
    Ok(BaselineMultiples {
        at,
        dvt_pos,
        dvt_neg,
        mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(axis: SweepAxis, points: Vec<f64>) -> SweepSpec {
        SweepSpec {
            axis,
            points,
            detectors: vec![Method::Float(DetectorKind::Dual)],
            replicates: 1,
            base_cfg: SyntheticConfig {
                duration_s: 3.0,
                ..Default::default()
            },
        }
    }

    #[test]
    fn spec_validation() {
        assert!(spec(SweepAxis::NoiseLevel, vec![0.1]).validate().is_err());
        assert!(spec(SweepAxis::NoiseLevel, vec![0.2, 0.1]).validate().is_err());
        assert!(spec(SweepAxis::ResolutionBits, vec![4.0, 4.5]).validate().is_err());
        let mut s = spec(SweepAxis::NoiseLevel, vec![0.0, 0.1]);
        s.replicates = 0;
        assert!(s.validate().is_err());
        assert!(spec(SweepAxis::RateHz, vec![8000.0, 16000.0]).validate().is_ok());
    }

    #[test]
    fn spec_toml_round_trip() {
        let mut s = spec(SweepAxis::RateHz, vec![8000.0, 16000.0]);
        s.detectors.push(Method::DualHw);
        let back = SweepSpec::from_toml(&s.to_toml(), Path::new("s.toml")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn noiseless_cell_is_perfect() {
        let s = spec(SweepAxis::NoiseLevel, vec![0.0, 0.01]);
        let cells = sweep(&s, &MethodParams::default(), &EvalConfig::default()).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].mean_accuracy, 1.0);
        assert_eq!(cells[0].std_accuracy, 0.0);
    }

    #[test]
    fn results_csv_round_trip() {
        assert_eq!(results_to_csv(&[]), format!("{RESULTS_HEADER}\n"));
        let cells = vec![SweepCell {
            axis: SweepAxis::ResolutionBits,
            point: 4.0,
            detector: "DUAL".into(),
            mean_accuracy: 0.987_654_321_012_345_6,
            std_accuracy: 0.012_345_678_9,
            replicates: 10,
        }];
        let text = results_to_csv(&cells);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_results_csv(&text, Path::new("r.csv")).unwrap(), cells);
    }

    #[test]
    fn scoring_skips_settle_region() {
        let eval = EvalConfig::default();
        let truth = GroundTruth::new(vec![100, WARMUP_SAMPLES + 500], None).unwrap();
        let r = eval.score_indices(&[WARMUP_SAMPLES + 502], &truth.spike_indices, 24_000.0);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
    }

    #[test]
    fn requantize_rounds_to_nearest_level() {
        let r = SignalRecord::new(vec![1.0, 0.3, -0.3, 0.06, -0.06, -1.0], 24_000.0, 0).unwrap();
        // 4 bits, full scale 1: LSB 1/8, levels k/8 for k in -8..=7
        let q = requantize(&r, 4).unwrap();
        assert_eq!(q.samples(), &[0.875, 0.25, -0.25, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("DUAL_HW".parse::<Method>().unwrap(), Method::DualHw);
        assert_eq!("mae".parse::<Method>().unwrap(), Method::Float(DetectorKind::Mae));
    }
}
