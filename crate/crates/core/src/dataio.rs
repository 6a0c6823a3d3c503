//! Synthetic extracellular recordings with ground truth, plus record and
//! ground-truth file IO and linear-interpolation resampling.
//!
//! A generated record is a train of 2 ms biphasic templates (unit trough
//! amplitude) at Poisson times thinned to a minimum inter-spike interval,
//! plus background noise. The noise is half (in variance) a dense train of
//! randomly scaled templates at random times and half band-limited Gaussian
//! noise, rescaled so that its standard deviation equals `noise_level` times
//! the mean spike peak. Background templates are time-stretched copies of the
//! foreground ones, standing in for more distant units.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SignalRecord;

/// Template window length in seconds.
pub const TEMPLATE_DURATION_S: f64 = 0.002;
/// Position of the template trough inside its window.
pub const TEMPLATE_TROUGH_S: f64 = 0.0006;
/// Rate of the background spikes that make up half of the noise variance.
pub const BACKGROUND_RATE_HZ: f64 = 20_000.0;
/// Time stretch applied to templates used as background spikes.
pub const BACKGROUND_STRETCH: f64 = 2.0;
/// Pass band of the Gaussian noise component.
pub const NOISE_BAND_HZ: (f64, f64) = (200.0, 800.0);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pub spike_indices: Vec<usize>,
    pub template_ids: Option<Vec<u32>>,
}

impl GroundTruth {
    pub fn new(spike_indices: Vec<usize>, template_ids: Option<Vec<u32>>) -> Result<Self> {
        if spike_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("ground-truth indices must be strictly increasing"));
        }
        if let Some(ids) = &template_ids {
            if ids.len() != spike_indices.len() {
                return Err(Error::invalid("template_ids length differs from spike_indices"));
            }
        }
        Ok(Self {
            spike_indices,
            template_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.spike_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spike_indices.is_empty()
    }

    pub fn check_bounds(&self, record_len: usize) -> Result<()> {
        match self.spike_indices.last() {
            Some(&k) if k >= record_len => Err(Error::invalid(format!(
                "ground-truth index {k} outside record of {record_len} samples"
            ))),
            _ => Ok(()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.template_ids {
            Some(ids) => {
                out.push_str("sample_index,template_id\n");
                for (k, id) in self.spike_indices.iter().zip(ids) {
                    out.push_str(&format!("{k},{id}\n"));
                }
            }
            None => {
                out.push_str("sample_index\n");
                for k in &self.spike_indices {
                    out.push_str(&format!("{k}\n"));
                }
            }
        }
        out
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut indices = Vec::new();
        let mut ids = Vec::new();
        let mut with_ids = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("sample_index")) {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let idx = cols.next().unwrap_or_default();
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("invalid sample index {idx:?}")))?;
            let id = cols.next();
            if cols.next().is_some() {
                return Err(Error::parse(origin, i + 1, "too many columns"));
            }
            let has_id = id.is_some();
            if *with_ids.get_or_insert(has_id) != has_id {
                return Err(Error::parse(origin, i + 1, "inconsistent column count"));
            }
            if let Some(id) = id {
                ids.push(
                    id.parse()
                        .map_err(|_| Error::parse(origin, i + 1, format!("invalid template id {id:?}")))?,
                );
            }
            if indices.last().is_some_and(|&last| last >= idx) {
                return Err(Error::parse(origin, i + 1, "indices must be strictly increasing"));
            }
            indices.push(idx);
        }
        Ok(Self {
            spike_indices: indices,
            template_ids: with_ids.unwrap_or(false).then_some(ids),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Same spikes expressed at another sampling rate.
    pub fn rescaled(&self, old_rate_hz: f64, new_rate_hz: f64, new_len: usize) -> Self {
        let ratio = new_rate_hz / old_rate_hz;
        let mut spike_indices = Vec::with_capacity(self.len());
        let mut template_ids = self.template_ids.as_ref().map(|_| Vec::new());
        for (i, &k) in self.spike_indices.iter().enumerate() {
            let j = ((k as f64 * ratio).round() as usize).min(new_len.saturating_sub(1));
            if spike_indices.last().is_some_and(|&l| l >= j) {
                continue;
            }
            spike_indices.push(j);
            if let (Some(out), Some(ids)) = (&mut template_ids, &self.template_ids) {
                out.push(ids[i]);
            }
        }
        Self {
            spike_indices,
            template_ids,
        }
    }
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GroundTruth::parse_csv(&text, path)
}

pub use crate::signal::{load_record, save_record};

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub duration_s: f64,
    pub rate_hz: f64,
    /// Noise std divided by the mean spike peak amplitude.
    pub noise_level: f64,
    pub firing_rate_hz: f64,
    pub n_templates: usize,
    pub min_isi_s: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            duration_s: 20.0,
            rate_hz: 24_000.0,
            noise_level: 0.1,
            firing_rate_hz: 30.0,
            n_templates: 3,
            min_isi_s: 0.003,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.duration_s) || !pos(self.rate_hz) || !pos(self.firing_rate_hz) {
            return Err(Error::invalid("duration_s, rate_hz and firing_rate_hz must be positive"));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::invalid("noise_level must be >= 0"));
        }
        if self.n_templates < 2 {
            return Err(Error::invalid("at least two templates are required"));
        }
        if !(self.min_isi_s.is_finite() && self.min_isi_s >= TEMPLATE_DURATION_S) {
            return Err(Error::invalid(format!(
                "min_isi_s must be at least the template duration ({TEMPLATE_DURATION_S} s)"
            )));
        }
        if self.min_isi_s * self.firing_rate_hz >= 1.0 {
            return Err(Error::invalid(format!(
                "infeasible spike train: min_isi_s * firing_rate_hz = {} >= 1",
                self.min_isi_s * self.firing_rate_hz
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
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
}

/// Biphasic spike shape: a narrow negative trough followed by a broader
/// positive rebound, normalized to a trough of exactly -1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Template {
    trough_width_s: f64,
    rebound_ratio: f64,
    rebound_delay_s: f64,
    rebound_width_s: f64,
    norm: f64,
}

impl Template {
    fn random(rng: &mut impl Rng) -> Self {
        let mut t = Self {
            trough_width_s: rng.random_range(0.07e-3..0.11e-3),
            rebound_ratio: rng.random_range(0.25..0.5),
            rebound_delay_s: rng.random_range(0.35e-3..0.55e-3),
            rebound_width_s: rng.random_range(0.20e-3..0.35e-3),
            norm: 1.0,
        };
        // the rebound can pull the trough value away from -1 slightly
        t.norm = -t.raw(0.0);
        t
    }

    /// The same shape stretched in time by `factor` (trough still -1).
    pub fn stretched(&self, factor: f64) -> Self {
        let mut t = Self {
            trough_width_s: self.trough_width_s * factor,
            rebound_delay_s: self.rebound_delay_s * factor,
            rebound_width_s: self.rebound_width_s * factor,
            norm: 1.0,
            ..*self
        };
        t.norm = -t.raw(0.0);
        t
    }

    fn raw(&self, dt: f64) -> f64 {
        let g = |x: f64, w: f64| (-0.5 * (x / w).powi(2)).exp();
        -g(dt, self.trough_width_s) + self.rebound_ratio * g(dt - self.rebound_delay_s, self.rebound_width_s)
    }

    /// Value at `dt` seconds relative to the trough; zero outside the window.
    pub fn at(&self, dt: f64) -> f64 {
        if dt < -TEMPLATE_TROUGH_S || dt >= TEMPLATE_DURATION_S - TEMPLATE_TROUGH_S {
            return 0.0;
        }
        self.raw(dt) / self.norm
    }
}

/// Adds `amp * template` centred (trough) at fractional sample position `pos`.
fn add_template(out: &mut [f64], tpl: &Template, pos: f64, amp: f64, rate_hz: f64) {
    let first = (pos - TEMPLATE_TROUGH_S * rate_hz).ceil().max(0.0) as usize;
    let last = ((pos + (TEMPLATE_DURATION_S - TEMPLATE_TROUGH_S) * rate_hz).ceil().max(0.0) as usize).min(out.len());
    for (k, slot) in out.iter_mut().enumerate().take(last).skip(first) {
        *slot += amp * tpl.at((k as f64 - pos) / rate_hz);
    }
}

fn one_pole_lowpass(x: &mut [f64], cutoff_hz: f64, rate_hz: f64) {
    let a = (-2.0 * std::f64::consts::PI * cutoff_hz / rate_hz).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
}

fn one_pole_highpass(x: &mut [f64], cutoff_hz: f64, rate_hz: f64) {
    let a = (-2.0 * std::f64::consts::PI * cutoff_hz / rate_hz).exp();
    let (mut y, mut prev) = (0.0, 0.0);
    for v in x.iter_mut() {
        y = a * (y + *v - prev);
        prev = *v;
        *v = y;
    }
}

fn center_and_scale(x: &mut [f64], target_std: f64) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter_mut().for_each(|v| *v -= mean);
    let std = (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let gain = if std > 0.0 { target_std / std } else { 0.0 };
    x.iter_mut().for_each(|v| *v *= gain);
}

/// Everything the generator produced, including the clean spike train and
/// noise separately for self-checks.
#[derive(Debug, Clone)]
pub struct Generated {
    pub record: SignalRecord,
    pub truth: GroundTruth,
    pub templates: Vec<Template>,
    pub noise: Vec<f64>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<(SignalRecord, GroundTruth)> {
    let g = generate_detailed(cfg)?;
    Ok((g.record, g.truth))
}

pub fn generate_detailed(cfg: &SyntheticConfig) -> Result<Generated> {
    cfg.validate()?;
    let rate = cfg.rate_hz;
    let n = (cfg.duration_s * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let templates: Vec<Template> = (0..cfg.n_templates).map(|_| Template::random(&mut rng)).collect();

    // Poisson spike times, thinned so consecutive spikes keep min_isi apart.
    let isi = Exp::new(cfg.firing_rate_hz).expect("positive rate");
    let min_isi = (cfg.min_isi_s * rate).ceil() as usize;
    let head = (TEMPLATE_TROUGH_S * rate).ceil() as usize;
    let tail = ((TEMPLATE_DURATION_S - TEMPLATE_TROUGH_S) * rate).ceil() as usize;
    let mut indices = Vec::new();
    let mut ids = Vec::new();
    let mut t = 0.0;
    loop {
        t += isi.sample(&mut rng);
        let k = (t * rate).round() as usize;
        if k + tail >= n {
            break;
        }
        if k < head || indices.last().is_some_and(|&last: &usize| k < last + min_isi) {
            continue;
        }
        indices.push(k);
        ids.push(rng.random_range(0..cfg.n_templates) as u32);
    }

    let mut samples = vec![0.0; n];
    for (&k, &id) in indices.iter().zip(&ids) {
        add_template(&mut samples, &templates[id as usize], k as f64, 1.0, rate);
    }

    let mean_peak = 1.0;
    let target = cfg.noise_level * mean_peak;
    let mut noise = vec![0.0; n];
    if target > 0.0 {
        let half = target / std::f64::consts::SQRT_2;

        let distant: Vec<Template> = templates.iter().map(|t| t.stretched(BACKGROUND_STRETCH)).collect();
        let mut background = vec![0.0; n];
        let bg_isi = Exp::new(BACKGROUND_RATE_HZ).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += bg_isi.sample(&mut rng);
            let pos = t * rate;
            if pos >= n as f64 {
                break;
            }
            let tpl = &distant[rng.random_range(0..distant.len())];
            let amp = rng.random_range(0.2..1.0);
            add_template(&mut background, tpl, pos, amp, rate);
        }
        center_and_scale(&mut background, half);

        let mut gauss: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        one_pole_highpass(&mut gauss, NOISE_BAND_HZ.0, rate);
        one_pole_lowpass(&mut gauss, NOISE_BAND_HZ.1, rate);
        one_pole_lowpass(&mut gauss, NOISE_BAND_HZ.1, rate);
        center_and_scale(&mut gauss, half);

        for k in 0..n {
            noise[k] = background[k] + gauss[k];
        }
        center_and_scale(&mut noise, target);
        for (s, v) in samples.iter_mut().zip(&noise) {
            *s += v;
        }
    }

    let record = SignalRecord::new(samples, rate, 0)?;
    let truth = GroundTruth::new(indices, Some(ids))?;
    Ok(Generated {
        record,
        truth,
        templates,
        noise,
    })
}

/// Std of the record outside every ground-truth template window.
pub fn masked_noise_std(record: &SignalRecord, truth: &GroundTruth) -> f64 {
    let rate = record.rate_hz();
    let head = (TEMPLATE_TROUGH_S * rate).ceil() as usize;
    let tail = ((TEMPLATE_DURATION_S - TEMPLATE_TROUGH_S) * rate).ceil() as usize;
    let mut keep = vec![true; record.len()];
    for &k in &truth.spike_indices {
        let lo = k.saturating_sub(head);
        let hi = (k + tail).min(record.len());
        keep[lo..hi].iter_mut().for_each(|v| *v = false);
    }
    let kept: Vec<f64> = record
        .samples()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| *s)
        .collect();
    crate::threshold::std_dev(&kept)
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Linear interpolation onto a new sample grid starting at t = 0. The output
/// never extrapolates past the last input sample.
pub fn resample(record: &SignalRecord, new_rate_hz: f64) -> Result<SignalRecord> {
    if !(new_rate_hz.is_finite() && new_rate_hz > 0.0) {
        return Err(Error::invalid(format!("new_rate_hz must be positive, got {new_rate_hz}")));
    }
    let x = record.samples();
    if new_rate_hz == record.rate_hz() || x.is_empty() {
        return SignalRecord::new(x.to_vec(), new_rate_hz, record.channel_id());
    }
    let step = record.rate_hz() / new_rate_hz;
    let n_out = (((x.len() - 1) as f64) / step).floor() as usize + 1;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let p = j as f64 * step;
        let i = (p.floor() as usize).min(x.len() - 1);
        let frac = p - i as f64;
        let v = if i + 1 < x.len() {
            x[i] + (x[i + 1] - x[i]) * frac
        } else {
            x[i]
        };
        out.push(v);
    }
    SignalRecord::new(out, new_rate_hz, record.channel_id())
}

/// Resample a record together with its ground truth.
pub fn resample_with_truth(
    record: &SignalRecord,
    truth: &GroundTruth,
    new_rate_hz: f64,
) -> Result<(SignalRecord, GroundTruth)> {
    let r = resample(record, new_rate_hz)?;
    let t = truth.rescaled(record.rate_hz(), new_rate_hz, r.len());
    Ok((r, t))
}
