//! Online σ estimation and the two TEO-domain thresholds derived from it.
//!
//! The estimator counts how many smoothed samples exceed the current σ in
//! each 256-sample frame and nudges σ by `gain * (count - K)` at the frame
//! boundary, so that in steady state about K samples per frame exceed it.
//! Thresholds are `thr_x = C1*σ` and `thr_s = C2*σ + C3*σ²`.

mod calibrate;

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use calibrate::{
    calibrate_coefficients, calibrate_hw, default_grid, dyadic_candidates, signed_candidates, evaluate_coefficients, CalibrationCorpus,
    CalibrationResult,
    Pipeline, SearchGrid,
};

pub const FRAME_LEN: usize = 256;
pub const CONVERGENCE_FACTOR: u32 = 20;
pub const SCALING_FACTOR: f64 = 0.001;
/// Detections are suppressed for this many frames after reset.
pub const WARMUP_FRAMES: usize = 16;
/// Fractional bits of the fixed-point σ register; the fixed-point gain is 2^-10.
pub const SIGMA_FRAC_BITS: u32 = 10;

// ---------------------------------------------------------------------------
// Floating-point estimator
// ---------------------------------------------------------------------------

/// Feedback-loop state of the σ estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaEstimatorState {
    pub sigma: f64,
    pub frame_len: u32,
    pub exceed_count: u32,
    pub samples_in_frame: u32,
    pub convergence_factor: u32,
    pub scaling_factor: f64,
}

impl SigmaEstimatorState {
    pub fn new(initial_sigma: f64) -> Self {
        Self {
            sigma: initial_sigma.max(0.0),
            frame_len: FRAME_LEN as u32,
            exceed_count: 0,
            samples_in_frame: 0,
            convergence_factor: CONVERGENCE_FACTOR,
            scaling_factor: SCALING_FACTOR,
        }
    }

    /// Feed one smoothed sample. Returns true when this sample closed a frame
    /// and σ was updated.
    pub fn step(&mut self, s: f64) -> bool {
        if s > self.sigma {
            self.exceed_count += 1;
        }
        self.samples_in_frame += 1;
        if self.samples_in_frame == self.frame_len {
            let err = self.exceed_count as f64 - self.convergence_factor as f64;
            self.sigma = (self.sigma + self.scaling_factor * err).max(0.0);
            self.exceed_count = 0;
            self.samples_in_frame = 0;
            true
        } else {
            false
        }
    }
}

/// Functional form of [`SigmaEstimatorState::step`].
pub fn estimator_step(mut state: SigmaEstimatorState, s_sample: f64) -> SigmaEstimatorState {
    state.step(s_sample);
    state
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

// ---------------------------------------------------------------------------
// Coefficients
// ---------------------------------------------------------------------------

/// `numerator * 2^-shift`, with the numerator restricted to at most two
/// signed power-of-two terms so it can be applied with shifts and one add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dyadic {
    numerator: i64,
    shift: u32,
}

impl Dyadic {
    pub const MAX_SHIFT: u32 = 30;

    pub fn new(numerator: i64, shift: u32) -> Result<Self> {
        if shift > Self::MAX_SHIFT {
            return Err(Error::invalid(format!("shift {shift} exceeds {}", Self::MAX_SHIFT)));
        }
        if numerator.unsigned_abs() > (1 << 32) {
            return Err(Error::invalid(format!("numerator {numerator} too large")));
        }
        if naf_weight(numerator) > 2 {
            return Err(Error::invalid(format!(
                "numerator {numerator} needs more than two power-of-two terms"
            )));
        }
        Ok(Self { numerator, shift })
    }

    pub const fn zero() -> Self {
        Self { numerator: 0, shift: 0 }
    }

    pub fn numerator(&self) -> i64 {
        self.numerator
    }

    pub fn shift(&self) -> u32 {
        self.shift
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / (1_u64 << self.shift) as f64
    }

    /// Number of signed power-of-two terms (non-adjacent form weight).
    pub fn terms(&self) -> u32 {
        naf_weight(self.numerator)
    }

    /// Same value with the smallest possible shift.
    pub fn reduced(self) -> Self {
        let mut d = self;
        while d.shift > 0 && d.numerator % 2 == 0 {
            d.numerator /= 2;
            d.shift -= 1;
        }
        if d.numerator == 0 {
            d.shift = 0;
        }
        d
    }
}

impl fmt::Display for Dyadic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/2^{}", self.numerator, self.shift)
    }
}

/// Minimal count of nonzero digits in a signed-binary representation.
pub fn naf_weight(n: i64) -> u32 {
    let mut n = n as i128;
    let mut w = 0;
    while n != 0 {
        if n & 1 == 1 {
            // choose digit ±1 so the remainder is divisible by 4
            let digit = 2 - n.rem_euclid(4);
            n -= digit;
            w += 1;
        }
        n >>= 1;
    }
    w
}

/// C1, C2, C3 of the two threshold equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ThresholdCoefficients {
    pub c1: Dyadic,
    pub c2: Dyadic,
    pub c3: Dyadic,
}

impl ThresholdCoefficients {
    pub fn new(c1: Dyadic, c2: Dyadic, c3: Dyadic) -> Self {
        Self { c1, c2, c3 }
    }

    pub fn terms(&self) -> u32 {
        self.c1.terms() + self.c2.terms() + self.c3.terms()
    }

    pub fn total_shift(&self) -> u32 {
        let r = |d: Dyadic| d.reduced().shift;
        r(self.c1) + r(self.c2) + r(self.c3)
    }

    /// Parse the `name numerator shift` fixture format.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut c = [None; 3];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::parse(origin, i + 1, "expected `name numerator shift`"));
            }
            let slot = match parts[0] {
                "c1" | "C1" => 0,
                "c2" | "C2" => 1,
                "c3" | "C3" => 2,
                other => return Err(Error::parse(origin, i + 1, format!("unknown coefficient {other:?}"))),
            };
            let num: i64 = parts[1]
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("invalid numerator {:?}", parts[1])))?;
            let shift: u32 = parts[2]
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("invalid shift {:?}", parts[2])))?;
            let d = Dyadic::new(num, shift).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
            c[slot] = Some(d);
        }
        let get = |i: usize, name: &str| c[i].ok_or_else(|| Error::parse(origin, 0, format!("missing {name}")));
        Ok(Self {
            c1: get(0, "c1")?,
            c2: get(1, "c2")?,
            c3: get(2, "c3")?,
        })
    }

    pub fn to_fixture(&self) -> String {
        format!(
            "c1 {} {}\nc2 {} {}\nc3 {} {}\n",
            self.c1.numerator, self.c1.shift, self.c2.numerator, self.c2.shift, self.c3.numerator, self.c3.shift
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_fixture()).map_err(|e| Error::io(path, e))
    }

    /// Shipped coefficients for the floating-point pipeline.
    pub fn default_float() -> Self {
        Self::parse(FLOAT_FIXTURE, Path::new("fixtures/coefficients_float.txt"))
            .expect("shipped float fixture parses")
    }

    /// Shipped coefficients for the fixed-point pipeline.
    pub fn default_hw() -> Self {
        Self::parse(HW_FIXTURE, Path::new("fixtures/coefficients_hw.txt"))
            .expect("shipped hw fixture parses")
    }
}

const FLOAT_FIXTURE: &str = include_str!("../../fixtures/coefficients_float.txt");
const HW_FIXTURE: &str = include_str!("../../fixtures/coefficients_hw.txt");

// ---------------------------------------------------------------------------
// Thresholds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPair {
    pub thr_x: f64,
    pub thr_s: f64,
}

pub fn compute_thresholds(sigma: f64, coeffs: &ThresholdCoefficients) -> ThresholdPair {
    ThresholdPair {
        thr_x: coeffs.c1.value() * sigma,
        thr_s: coeffs.c2.value() * sigma + coeffs.c3.value() * sigma * sigma,
    }
}

/// Integer thresholds, compared with strict `>` against integer TEO values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ThresholdPairQ {
    pub thr_x: i64,
    pub thr_s: i64,
}

/// Thresholds from a σ register holding `SIGMA_FRAC_BITS` fractional bits.
/// All products are exact; the only rounding is the final floor.
pub fn compute_thresholds_fixed(sigma_q: i64, coeffs: &ThresholdCoefficients) -> ThresholdPairQ {
    let f = SIGMA_FRAC_BITS;
    let s = sigma_q as i128;
    let c1 = coeffs.c1;
    let thr_x = (c1.numerator as i128 * s) >> (c1.shift + f);

    let (c2, c3) = (coeffs.c2, coeffs.c3);
    let d2 = c2.shift + f;
    let d3 = c3.shift + 2 * f;
    let d = d2.max(d3);
    let num = ((c2.numerator as i128 * s) << (d - d2)) + ((c3.numerator as i128 * s * s) << (d - d3));
    let thr_s = num >> d;

    let clamp = |v: i128| v.clamp(i64::MIN as i128, i64::MAX as i128) as i64;
    ThresholdPairQ {
        thr_x: clamp(thr_x),
        thr_s: clamp(thr_s),
    }
}

// ---------------------------------------------------------------------------
// Adaptive threshold trackers: first frame seeds σ with its empirical std,
// afterwards the feedback loop runs and thresholds follow each update.
// ---------------------------------------------------------------------------

/// Floating-point tracker fed with the smoothed signal one sample at a time.
#[derive(Debug, Clone)]
pub struct AdaptiveThreshold {
    coeffs: ThresholdCoefficients,
    seed: Vec<f64>,
    estimator: Option<SigmaEstimatorState>,
    thresholds: ThresholdPair,
    samples_seen: usize,
}

impl AdaptiveThreshold {
    pub fn new(coeffs: ThresholdCoefficients) -> Self {
        Self {
            coeffs,
            seed: Vec::with_capacity(FRAME_LEN),
            estimator: None,
            thresholds: ThresholdPair {
                thr_x: f64::INFINITY,
                thr_s: f64::INFINITY,
            },
            samples_seen: 0,
        }
    }

    pub fn step(&mut self, s: f64) {
        self.samples_seen += 1;
        match &mut self.estimator {
            Some(est) => {
                if est.step(s) {
                    self.thresholds = compute_thresholds(est.sigma, &self.coeffs);
                }
            }
            None => {
                self.seed.push(s);
                if self.seed.len() == FRAME_LEN {
                    let est = SigmaEstimatorState::new(std_dev(&self.seed));
                    self.thresholds = compute_thresholds(est.sigma, &self.coeffs);
                    self.estimator = Some(est);
                    self.seed = Vec::new();
                }
            }
        }
    }

    pub fn thresholds(&self) -> ThresholdPair {
        self.thresholds
    }

    pub fn sigma(&self) -> Option<f64> {
        self.estimator.map(|e| e.sigma)
    }

    pub fn state(&self) -> Option<&SigmaEstimatorState> {
        self.estimator.as_ref()
    }

    /// True once the warm-up frames have elapsed.
    pub fn armed(&self) -> bool {
        self.samples_seen > WARMUP_FRAMES * FRAME_LEN
    }
}

/// Fixed-point σ estimator: σ is held with `SIGMA_FRAC_BITS` fractional
/// bits, so a gain of 2^-10 turns into adding `count - K` to the register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SigmaEstimatorQ {
    pub sigma_q: i64,
    pub exceed_count: u32,
    pub samples_in_frame: u32,
}

impl SigmaEstimatorQ {
    pub fn new(sigma_q: i64) -> Self {
        Self {
            sigma_q: sigma_q.max(0),
            exceed_count: 0,
            samples_in_frame: 0,
        }
    }

    pub fn step(&mut self, s: i64) -> bool {
        if (s << SIGMA_FRAC_BITS) > self.sigma_q {
            self.exceed_count += 1;
        }
        self.samples_in_frame += 1;
        if self.samples_in_frame == FRAME_LEN as u32 {
            let err = self.exceed_count as i64 - CONVERGENCE_FACTOR as i64;
            self.sigma_q = (self.sigma_q + err).max(0);
            self.exceed_count = 0;
            self.samples_in_frame = 0;
            true
        } else {
            false
        }
    }
}

/// Floor of the population std of integer samples, in Q(`SIGMA_FRAC_BITS`).
pub fn std_dev_fixed(xs: &[i64]) -> i64 {
    if xs.is_empty() {
        return 0;
    }
    let n = xs.len() as i128;
    let sum: i128 = xs.iter().map(|&x| x as i128).sum();
    let sum_sq: i128 = xs.iter().map(|&x| (x as i128) * (x as i128)).sum();
    // var * 2^(2F) = (n*Σx² - (Σx)²) * 2^(2F) / n²
    let num = (n * sum_sq - sum * sum) << (2 * SIGMA_FRAC_BITS);
    let var_q = (num / (n * n)) as u128;
    var_q.isqrt() as i64
}

/// Integer counterpart of [`AdaptiveThreshold`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptiveThresholdQ {
    coeffs: ThresholdCoefficients,
    seed_sum: i64,
    seed_sum_sq: i64,
    seed_n: u32,
    estimator: Option<SigmaEstimatorQ>,
    thresholds: ThresholdPairQ,
    samples_seen: u64,
}

impl AdaptiveThresholdQ {
    pub fn new(coeffs: ThresholdCoefficients) -> Self {
        Self {
            coeffs,
            seed_sum: 0,
            seed_sum_sq: 0,
            seed_n: 0,
            estimator: None,
            thresholds: ThresholdPairQ {
                thr_x: i64::MAX,
                thr_s: i64::MAX,
            },
            samples_seen: 0,
        }
    }

    pub fn step(&mut self, s: i64) {
        self.samples_seen += 1;
        match &mut self.estimator {
            Some(est) => {
                if est.step(s) {
                    self.thresholds = compute_thresholds_fixed(est.sigma_q, &self.coeffs);
                }
            }
            None => {
                self.seed_sum += s;
                self.seed_sum_sq += s * s;
                self.seed_n += 1;
                if self.seed_n == FRAME_LEN as u32 {
                    let n = self.seed_n as i128;
                    let num = (n * self.seed_sum_sq as i128 - (self.seed_sum as i128).pow(2))
                        << (2 * SIGMA_FRAC_BITS);
                    let sigma_q = ((num / (n * n)) as u128).isqrt() as i64;
                    let est = SigmaEstimatorQ::new(sigma_q);
                    self.thresholds = compute_thresholds_fixed(est.sigma_q, &self.coeffs);
                    self.estimator = Some(est);
                }
            }
        }
    }

    pub fn thresholds(&self) -> ThresholdPairQ {
        self.thresholds
    }

    pub fn sigma_q(&self) -> Option<i64> {
        self.estimator.map(|e| e.sigma_q)
    }

    pub fn armed(&self) -> bool {
        self.samples_seen > (WARMUP_FRAMES * FRAME_LEN) as u64
    }
}
