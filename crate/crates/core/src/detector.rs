//! Spike detectors: the dual TEO detector, its single-path variants, and the
//! amplitude/energy baselines (AT, DVT, MAE). All of them produce a boolean
//! crossing stream that is turned into discrete events by [`EventFormer`].

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::signal::SignalRecord;
use crate::threshold::{AdaptiveThreshold, ThresholdCoefficients, ThresholdPair, FRAME_LEN, WARMUP_FRAMES};
use crate::transforms::{smooth2, teo};

/// Samples consumed before the adaptive detectors may fire.
pub const WARMUP_SAMPLES: usize = WARMUP_FRAMES * FRAME_LEN;
/// Trailing window of the MAE baseline.
pub const MAE_WINDOW: usize = 8;

/// Per-baseline threshold multiples chosen by `calibrate` on the synthetic corpus.
pub const DEFAULT_AT_MULTIPLE: f64 = 4.125;
pub const DEFAULT_DVT_POS_MULTIPLE: f64 = 4.5;
pub const DEFAULT_DVT_NEG_MULTIPLE: f64 = 4.0;
pub const DEFAULT_MAE_MULTIPLE: f64 = 10.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpikeEvent {
    pub channel_id: u32,
    pub sample_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DetectStatus {
    #[default]
    Ok,
    /// The record did not outlast the estimator warm-up; nothing was detected.
    ShorterThanWarmup,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpikeEventList {
    pub events: Vec<SpikeEvent>,
    pub status: DetectStatus,
}

impl SpikeEventList {
    pub fn new(events: Vec<SpikeEvent>) -> Self {
        Self {
            events,
            status: DetectStatus::Ok,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.sample_index).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,sample_index\n");
        for e in &self.events {
            out.push_str(&format!("{},{}\n", e.channel_id, e.sample_index));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "channel,sample_index" => {}
            _ => return Err(Error::parse(origin, 1, "expected header channel,sample_index")),
        }
        let mut events = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (c, k) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected channel,sample_index"))?;
            let bad = || Error::parse(origin, i + 1, format!("invalid row {line:?}"));
            events.push(SpikeEvent {
                channel_id: c.trim().parse().map_err(|_| bad())?,
                sample_index: k.trim().parse().map_err(|_| bad())?,
            });
        }
        Ok(Self::new(events))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }
}

// ---------------------------------------------------------------------------
// Event formation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    CrossingStart,
    #[default]
    TeoPeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventFormationConfig {
    pub refractory_samples: usize,
    pub alignment: Alignment,
}

impl EventFormationConfig {
    /// 1 ms refractory period at the given rate, peak alignment.
    pub fn for_rate(rate_hz: f64) -> Self {
        Self {
            refractory_samples: ((rate_hz / 1000.0).round() as usize).max(1),
            alignment: Alignment::TeoPeak,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Run<T> {
    start: usize,
    last: usize,
    peak_idx: usize,
    peak_val: T,
}

/// Streaming merger of crossing samples into events.
///
/// Crossings closer than `refractory_samples` to the previous crossing extend
/// the open run; otherwise the run is closed and its event emitted. Because
/// runs are only split by gaps of at least the refractory length, emitted
/// events are always at least that far apart.
#[derive(Debug, Clone)]
pub struct EventFormer<T> {
    cfg: EventFormationConfig,
    open: Option<Run<T>>,
}

impl<T: PartialOrd + Copy> EventFormer<T> {
    pub fn new(cfg: EventFormationConfig) -> Self {
        Self { cfg, open: None }
    }

    fn emit(&self, run: &Run<T>) -> usize {
        match self.cfg.alignment {
            Alignment::CrossingStart => run.start,
            Alignment::TeoPeak => run.peak_idx,
        }
    }

    /// Register a crossing at `idx` (strictly increasing) with alignment value `value`.
    pub fn push(&mut self, idx: usize, value: T) -> Option<usize> {
        let refractory = self.cfg.refractory_samples.max(1);
        if let Some(run) = &mut self.open {
            if idx - run.last < refractory {
                run.last = idx;
                if value > run.peak_val {
                    run.peak_val = value;
                    run.peak_idx = idx;
                }
                return None;
            }
        }
        let closed = self.open.take().map(|r| self.emit(&r));
        self.open = Some(Run {
            start: idx,
            last: idx,
            peak_idx: idx,
            peak_val: value,
        });
        closed
    }

    /// Samples remaining before the open run closes, measured from `now`.
    pub fn refractory_countdown(&self, now: usize) -> usize {
        match &self.open {
            Some(run) => (run.last + self.cfg.refractory_samples).saturating_sub(now),
            None => 0,
        }
    }

    pub fn finish(&mut self) -> Option<usize> {
        self.open.take().map(|r| self.emit(&r))
    }
}

pub fn form_events(
    crossings: &[bool],
    teo_values: &[f64],
    cfg: &EventFormationConfig,
    channel_id: u32,
) -> SpikeEventList {
    assert_eq!(crossings.len(), teo_values.len(), "sequence lengths differ");
    let idx = crossings.iter().enumerate().filter(|(_, &c)| c).map(|(k, _)| k);
    form_events_sparse(idx, |k| teo_values[k], cfg, channel_id)
}

/// Event formation over the indices of true crossings.
pub fn form_events_sparse<T: PartialOrd + Copy>(
    crossing_indices: impl IntoIterator<Item = usize>,
    value: impl Fn(usize) -> T,
    cfg: &EventFormationConfig,
    channel_id: u32,
) -> SpikeEventList {
    let mut former = EventFormer::new(*cfg);
    let mut events = Vec::new();
    let mut push = |k: usize| {
        events.push(SpikeEvent {
            channel_id,
            sample_index: k,
        })
    };
    for k in crossing_indices {
        if let Some(e) = former.push(k, value(k)) {
            push(e);
        }
    }
    if let Some(e) = former.finish() {
        push(e);
    }
    SpikeEventList::new(events)
}

// ---------------------------------------------------------------------------
// Dual detector
// ---------------------------------------------------------------------------

/// Which TEO paths contribute crossings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paths {
    pub raw: bool,
    pub smoothed: bool,
}

impl Paths {
    pub const BOTH: Paths = Paths { raw: true, smoothed: true };
    pub const RAW: Paths = Paths { raw: true, smoothed: false };
    pub const SMOOTHED: Paths = Paths { raw: false, smoothed: true };
}

/// Every intermediate of the floating-point dual detector.
#[derive(Debug, Clone)]
pub struct DualTrace {
    pub s: Vec<f64>,
    pub xteo: Vec<f64>,
    pub steo: Vec<f64>,
    /// σ in effect after the estimator consumed sample k (∞ before seeding).
    pub sigma: Vec<f64>,
    pub thresholds: Vec<ThresholdPair>,
    pub raw_crossings: Vec<bool>,
    pub smoothed_crossings: Vec<bool>,
}

impl DualTrace {
    pub fn crossings(&self, paths: Paths) -> Vec<bool> {
        self.raw_crossings
            .iter()
            .zip(&self.smoothed_crossings)
            .map(|(&r, &s)| (paths.raw && r) || (paths.smoothed && s))
            .collect()
    }
}

/// Run both TEO paths and the shared adaptive threshold over `x`.
pub fn dual_trace(x: &[f64], coeffs: &ThresholdCoefficients) -> DualTrace {
    let n = x.len();
    let s = smooth2(x);
    let xteo = teo(x).into_vec();
    let steo = teo(&s).into_vec();
    let mut tracker = AdaptiveThreshold::new(*coeffs);
    let mut sigma = Vec::with_capacity(n);
    let mut thresholds = Vec::with_capacity(n);
    let mut raw_crossings = vec![false; n];
    let mut smoothed_crossings = vec![false; n];
    for k in 0..n {
        tracker.step(s[k]);
        let thr = tracker.thresholds();
        sigma.push(tracker.sigma().unwrap_or(f64::INFINITY));
        thresholds.push(thr);
        if tracker.armed() {
            raw_crossings[k] = xteo[k] > thr.thr_x;
            smoothed_crossings[k] = steo[k] > thr.thr_s;
        }
    }
    DualTrace {
        s,
        xteo,
        steo,
        sigma,
        thresholds,
        raw_crossings,
        smoothed_crossings,
    }
}

pub fn detect_paths(
    record: &SignalRecord,
    coeffs: &ThresholdCoefficients,
    cfg: &EventFormationConfig,
    paths: Paths,
) -> SpikeEventList {
    if record.len() <= WARMUP_SAMPLES {
        return SpikeEventList {
            events: Vec::new(),
            status: DetectStatus::ShorterThanWarmup,
        };
    }
    let trace = dual_trace(record.samples(), coeffs);
    let crossings = trace.crossings(paths);
    // raw-path TEO positions the event; the smoothed path lags by half a sample
    form_events(&crossings, &trace.xteo, cfg, record.channel_id())
}

pub fn detect_dual(
    record: &SignalRecord,
    coeffs: &ThresholdCoefficients,
    cfg: &EventFormationConfig,
) -> SpikeEventList {
    detect_paths(record, coeffs, cfg, Paths::BOTH)
}

/// Raw-signal TEO path of the dual detector on its own.
pub fn detect_teo_single(
    record: &SignalRecord,
    coeffs: &ThresholdCoefficients,
    cfg: &EventFormationConfig,
) -> SpikeEventList {
    detect_paths(record, coeffs, cfg, Paths::RAW)
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Robust noise σ of a signal: median(|x|) / 0.6745.
pub fn noise_sigma(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let mid = abs.len() / 2;
    let (_, m, _) = abs.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m / 0.6745
}

fn abs_peak_events(x: &[f64], crossing: impl Fn(f64) -> bool, cfg: &EventFormationConfig, ch: u32) -> SpikeEventList {
    let idx = x.iter().enumerate().filter(|(_, &v)| crossing(v)).map(|(k, _)| k);
    form_events_sparse(idx, |k| x[k].abs(), cfg, ch)
}

/// Absolute thresholding: |x| > multiple * σ̂.
pub fn detect_at(record: &SignalRecord, threshold_multiple: f64, cfg: &EventFormationConfig) -> SpikeEventList {
    let x = record.samples();
    let t = threshold_multiple * noise_sigma(x);
    abs_peak_events(x, |v| v.abs() > t, cfg, record.channel_id())
}

/// Dual vertex thresholds: x > pos * σ̂ or x < -neg * σ̂.
pub fn detect_dvt(
    record: &SignalRecord,
    pos_multiple: f64,
    neg_multiple: f64,
    cfg: &EventFormationConfig,
) -> SpikeEventList {
    let x = record.samples();
    let sigma = noise_sigma(x);
    let (tp, tn) = (pos_multiple * sigma, neg_multiple * sigma);
    abs_peak_events(x, |v| v > tp || v < -tn, cfg, record.channel_id())
}

/// Trailing-window mean of x², dividing by the full window from the start.
pub fn moving_average_energy(x: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        acc += x[k] * x[k];
        if k >= window {
            acc -= x[k - window] * x[k - window];
        }
        out.push(acc.max(0.0) / window as f64);
    }
    out
}

/// Moving average energy: e[k] > multiple * σ̂².
pub fn detect_mae(
    record: &SignalRecord,
    window: usize,
    threshold_multiple: f64,
    cfg: &EventFormationConfig,
) -> SpikeEventList {
    let x = record.samples();
    let sigma = noise_sigma(x);
    let e = moving_average_energy(x, window);
    let t = threshold_multiple * sigma * sigma;
    let idx = e.iter().enumerate().filter(|(_, &v)| v > t).map(|(k, _)| k);
    form_events_sparse(idx, |k| e[k], cfg, record.channel_id())
}

// ---------------------------------------------------------------------------
// Detector selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorKind {
    Dual,
    At,
    Dvt,
    Mae,
    TeoSingle,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 5] = [
        DetectorKind::Dual,
        DetectorKind::At,
        DetectorKind::Dvt,
        DetectorKind::Mae,
        DetectorKind::TeoSingle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Dual => "DUAL",
            DetectorKind::At => "AT",
            DetectorKind::Dvt => "DVT",
            DetectorKind::Mae => "MAE",
            DetectorKind::TeoSingle => "TEO_SINGLE",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "DUAL" => Ok(DetectorKind::Dual),
            "AT" => Ok(DetectorKind::At),
            "DVT" => Ok(DetectorKind::Dvt),
            "MAE" => Ok(DetectorKind::Mae),
            "TEO_SINGLE" | "TEO" => Ok(DetectorKind::TeoSingle),
            other => Err(Error::invalid(format!("unknown detector {other:?}"))),
        }
    }
}

/// Parameters of every detector, as used by the CLI and the sweep harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    pub coeffs: ThresholdCoefficients,
    pub at_multiple: f64,
    pub dvt_pos_multiple: f64,
    pub dvt_neg_multiple: f64,
    pub mae_window: usize,
    pub mae_multiple: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            coeffs: ThresholdCoefficients::default_float(),
            at_multiple: DEFAULT_AT_MULTIPLE,
            dvt_pos_multiple: DEFAULT_DVT_POS_MULTIPLE,
            dvt_neg_multiple: DEFAULT_DVT_NEG_MULTIPLE,
            mae_window: MAE_WINDOW,
            mae_multiple: DEFAULT_MAE_MULTIPLE,
        }
    }
}

pub fn detect(
    kind: DetectorKind,
    record: &SignalRecord,
    params: &DetectorParams,
    cfg: &EventFormationConfig,
) -> SpikeEventList {
    match kind {
        DetectorKind::Dual => detect_dual(record, &params.coeffs, cfg),
        DetectorKind::TeoSingle => detect_teo_single(record, &params.coeffs, cfg),
        DetectorKind::At => detect_at(record, params.at_multiple, cfg),
        DetectorKind::Dvt => detect_dvt(record, params.dvt_pos_multiple, params.dvt_neg_multiple, cfg),
        DetectorKind::Mae => detect_mae(record, params.mae_window, params.mae_multiple, cfg),
    }
}
