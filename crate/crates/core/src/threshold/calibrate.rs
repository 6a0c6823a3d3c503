//! Grid search for the threshold coefficients.
//!
//! σ does not depend on the coefficients, so each training record is traced
//! once; every candidate is then scored from the stored TEO values and σ
//! history. Crossing lists are built per C1 and per (C2, C3) and merged per
//! grid point, which reproduces the detectors' output exactly.

use rayon::prelude::*;

use super::{compute_thresholds, compute_thresholds_fixed, naf_weight, Dyadic, ThresholdCoefficients};
use crate::bench::{to_hw_input, EvalConfig};
use crate::dataio::GroundTruth;
use crate::detector::{dual_trace, form_events_sparse, EventFormationConfig, WARMUP_SAMPLES};
use crate::error::{Error, Result};
use crate::hw::{trace_internal, HwConfig};
use crate::metrics::accuracy;
use crate::signal::SignalRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pipeline {
    Float,
    Hw(HwConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchGrid {
    pub c1: Vec<Dyadic>,
    pub c2: Vec<Dyadic>,
    pub c3: Vec<Dyadic>,
}

/// Non-negative dyadics with at most two signed power-of-two terms, shift at
/// most `max_shift`, value in `[lo, hi]`, in ascending order.
pub fn dyadic_candidates(lo: f64, hi: f64, max_shift: u32) -> Vec<Dyadic> {
    let top = (hi * f64::from(1u32 << max_shift)).floor() as i64;
    let mut out: Vec<Dyadic> = (0..=top)
        .filter(|&n| naf_weight(n) <= 2)
        .filter_map(|n| Dyadic::new(n, max_shift).ok())
        .map(Dyadic::reduced)
        .filter(|d| d.value() >= lo && d.value() <= hi)
        .collect();
    out.dedup();
    out
}

/// [`dyadic_candidates`] in `[0, max_abs]` together with their negatives.
pub fn signed_candidates(max_abs: f64, max_shift: u32) -> Vec<Dyadic> {
    let pos = dyadic_candidates(0.0, max_abs, max_shift);
    let mut out: Vec<Dyadic> = pos
        .iter()
        .rev()
        .filter(|d| d.numerator() != 0)
        .map(|d| Dyadic::new(-d.numerator(), d.shift()).expect("negation keeps the term count"))
        .collect();
    out.extend(pos);
    out
}

/// A negative C3 bends the smoothed-path threshold below linear growth in σ.
pub fn default_grid(pipeline: &Pipeline) -> SearchGrid {
    match pipeline {
        Pipeline::Float => SearchGrid {
            c1: dyadic_candidates(0.25, 16.0, 4),
            c2: dyadic_candidates(0.0, 16.0, 3),
            c3: signed_candidates(4.0, 3),
        },
        Pipeline::Hw(_) => SearchGrid {
            c1: dyadic_candidates(0.125, 8.0, 4),
            c2: dyadic_candidates(0.0, 8.0, 3),
            c3: signed_candidates(0.5, 6),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    pub coeffs: ThresholdCoefficients,
    pub mean_accuracy: f64,
}

enum Trace {
    Float { xteo: Vec<f64>, steo: Vec<f64>, sigma: Vec<f64> },
    Fixed { xteo: Vec<i64>, steo: Vec<i64>, sigma_q: Vec<i64> },
}

struct Prepared {
    trace: Trace,
    truth: Vec<usize>,
    rate_hz: f64,
    evt_cfg: EventFormationConfig,
}

impl Prepared {
    fn len(&self) -> usize {
        match &self.trace {
            Trace::Float { xteo, .. } => xteo.len(),
            Trace::Fixed { xteo, .. } => xteo.len(),
        }
    }

    fn crossings(&self, c1: Option<Dyadic>, c23: Option<(Dyadic, Dyadic)>) -> Vec<u32> {
        let z = Dyadic::zero();
        let coeffs = ThresholdCoefficients::new(
            c1.unwrap_or(z),
            c23.map_or(z, |c| c.0),
            c23.map_or(z, |c| c.1),
        );
        let mut out = Vec::new();
        let start = WARMUP_SAMPLES.min(self.len());
        match &self.trace {
            Trace::Float { xteo, steo, sigma } => {
                let (vals, raw) = if c1.is_some() { (xteo, true) } else { (steo, false) };
                let mut cached = (f64::NAN, 0.0);
                for k in start..vals.len() {
                    if sigma[k] != cached.0 {
                        let t = compute_thresholds(sigma[k], &coeffs);
                        cached = (sigma[k], if raw { t.thr_x } else { t.thr_s });
                    }
                    if vals[k] > cached.1 {
                        out.push(k as u32);
                    }
                }
            }
            Trace::Fixed { xteo, steo, sigma_q } => {
                let (vals, raw) = if c1.is_some() { (xteo, true) } else { (steo, false) };
                let mut cached = (-1i64, 0i64);
                for k in start..vals.len() {
                    if sigma_q[k] != cached.0 {
                        let t = compute_thresholds_fixed(sigma_q[k], &coeffs);
                        cached = (sigma_q[k], if raw { t.thr_x } else { t.thr_s });
                    }
                    if vals[k] > cached.1 {
                        out.push(k as u32);
                    }
                }
            }
        }
        out
    }

    fn accuracy(&self, raw: &[u32], smoothed: &[u32], eval: &EvalConfig) -> Result<f64> {
        let merged = merge(raw, smoothed);
        let events = match &self.trace {
            Trace::Float { xteo, .. } => form_events_sparse(merged, |k| xteo[k], &self.evt_cfg, 0),
            Trace::Fixed { xteo, .. } => form_events_sparse(merged, |k| xteo[k], &self.evt_cfg, 0),
        };
        accuracy(&eval.score_indices(&events.indices(), &self.truth, self.rate_hz))
    }
}

fn merge(a: &[u32], b: &[u32]) -> impl Iterator<Item = usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (_, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        out.push(v as usize);
    }
    out.into_iter()
}

/// Training records traced once for a given pipeline.
pub struct CalibrationCorpus {
    pipeline: Pipeline,
    eval: EvalConfig,
    records: Vec<Prepared>,
}

impl CalibrationCorpus {
    pub fn new(pipeline: Pipeline, records: &[(SignalRecord, GroundTruth)], eval: EvalConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let prepared = records
            .par_iter()
            .map(|(rec, truth)| prepare(&pipeline, rec, truth))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pipeline,
            eval,
            records: prepared,
        })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn prepare(pipeline: &Pipeline, rec: &SignalRecord, truth: &GroundTruth) -> Result<Prepared> {
    match pipeline {
        Pipeline::Float => {
            truth.check_bounds(rec.len())?;
            let t = dual_trace(rec.samples(), &ThresholdCoefficients::default_float());
            Ok(Prepared {
                trace: Trace::Float {
                    xteo: t.xteo,
                    steo: t.steo,
                    sigma: t.sigma,
                },
                truth: truth.spike_indices.clone(),
                rate_hz: rec.rate_hz(),
                evt_cfg: EventFormationConfig::for_rate(rec.rate_hz()),
            })
        }
        Pipeline::Hw(cfg) => {
            let (q, t) = to_hw_input(rec, truth, cfg)?;
            let rows = trace_internal(&q, cfg, &ThresholdCoefficients::default_hw())?;
            Ok(Prepared {
                trace: Trace::Fixed {
                    xteo: rows.iter().map(|r| r.x_teo).collect(),
                    steo: rows.iter().map(|r| r.s_teo).collect(),
                    sigma_q: rows.iter().map(|r| r.sigma_q).collect(),
                },
                truth: t.spike_indices,
                rate_hz: cfg.rate_hz,
                evt_cfg: EventFormationConfig::for_rate(cfg.rate_hz),
            })
        }
    }
}

/// Mean per-record accuracy of `coeffs` on the corpus.
pub fn evaluate_coefficients(corpus: &CalibrationCorpus, coeffs: &ThresholdCoefficients) -> Result<f64> {
    let mut sum = 0.0;
    for r in &corpus.records {
        let raw = r.crossings(Some(coeffs.c1), None);
        let sm = r.crossings(None, Some((coeffs.c2, coeffs.c3)));
        sum += r.accuracy(&raw, &sm, &corpus.eval)?;
    }
    Ok(sum / corpus.records.len() as f64)
}

/// `a` is preferred over `b` at equal accuracy.
fn simpler(a: &ThresholdCoefficients, b: &ThresholdCoefficients) -> bool {
    let key = |c: &ThresholdCoefficients| (c.terms(), c.total_shift());
    key(a) < key(b)
}

/// Exhaustive search: highest mean accuracy, then fewest power-of-two terms,
/// then smallest total shift, then first in grid order.
pub fn calibrate_coefficients(corpus: &CalibrationCorpus, grid: &SearchGrid) -> Result<CalibrationResult> {
    if corpus.records.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if grid.c1.is_empty() || grid.c2.is_empty() || grid.c3.is_empty() {
        return Err(Error::invalid("empty coefficient grid"));
    }
    let raw: Vec<Vec<Vec<u32>>> = grid
        .c1
        .par_iter()
        .map(|&c1| corpus.records.iter().map(|r| r.crossings(Some(c1), None)).collect())
        .collect();
    let pairs: Vec<(Dyadic, Dyadic)> = grid
        .c2
        .iter()
        .flat_map(|&c2| grid.c3.iter().map(move |&c3| (c2, c3)))
        .collect();

    // best per (c2, c3), then reduced in grid order
    let per_pair: Vec<Option<CalibrationResult>> = pairs
        .par_iter()
        .map(|&(c2, c3)| -> Result<Option<CalibrationResult>> {
            let sm: Vec<Vec<u32>> = corpus.records.iter().map(|r| r.crossings(None, Some((c2, c3)))).collect();
            let mut best: Option<CalibrationResult> = None;
            for (i, &c1) in grid.c1.iter().enumerate() {
                let mut sum = 0.0;
                for (j, r) in corpus.records.iter().enumerate() {
                    sum += r.accuracy(&raw[i][j], &sm[j], &corpus.eval)?;
                }
                let cand = CalibrationResult {
                    coeffs: ThresholdCoefficients::new(c1, c2, c3),
                    mean_accuracy: sum / corpus.records.len() as f64,
                };
                best = Some(pick(best, cand));
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let mut best = None;
    for cand in per_pair.into_iter().flatten() {
        best = Some(pick(best, cand));
    }
    Ok(best.expect("grid is non-empty"))
}

fn pick(best: Option<CalibrationResult>, cand: CalibrationResult) -> CalibrationResult {
    match best {
        None => cand,
        Some(b) => {
            if cand.mean_accuracy > b.mean_accuracy
                || (cand.mean_accuracy == b.mean_accuracy && simpler(&cand.coeffs, &b.coeffs))
            {
                cand
            } else {
                b
            }
        }
    }
}

/// Drop counts and coefficients for the fixed-point datapath, searched jointly.
pub fn calibrate_hw(
    base: HwConfig,
    records: &[(SignalRecord, GroundTruth)],
    eval: EvalConfig,
    xteo_drops: &[u32],
    steo_drops: &[u32],
    grid: &SearchGrid,
) -> Result<(HwConfig, CalibrationResult)> {
    let mut best: Option<(HwConfig, CalibrationResult)> = None;
    for &dx in xteo_drops {
        for &ds in steo_drops {
            let cfg = HwConfig {
                xteo_drop_lsbs: dx,
                steo_drop_lsbs: ds,
                ..base
            };
            cfg.validate()?;
            let corpus = CalibrationCorpus::new(Pipeline::Hw(cfg), records, eval)?;
            let r = calibrate_coefficients(&corpus, grid)?;
            if best.as_ref().is_none_or(|(_, b)| r.mean_accuracy > b.mean_accuracy) {
                best = Some((cfg, r));
            }
        }
    }
    best.ok_or_else(|| Error::invalid("empty drop grid"))
}
