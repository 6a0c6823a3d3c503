//! Bit-exact integer model of the dual detector datapath and of the
//! 256-channel time-multiplexed array built from 32-channel blocks.
//!
//! Per input sample the datapath is:
//!
//! ```text
//! x (7b) ──┬──────────────► TEO ─► >>xdrop ─► X_TEO (8b) ─► > thr_x ─┐
//!          └─► avg2 ─► S (6b) ─► TEO ─► >>sdrop ─► S_TEO (9b) ─► > thr_s ─┴─ OR ─► events
//!                      └─► σ estimator ─► thr_x, thr_s
//! ```
//!
//! No floating-point value is touched between the input codes and the event
//! indices.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::detector::{DetectStatus, EventFormationConfig, EventFormer, SpikeEvent, SpikeEventList, WARMUP_SAMPLES};
use crate::error::{Error, Result};
use crate::signal::{truncate_to, FixedPointFormat, QuantizedRecord};
use crate::threshold::{AdaptiveThresholdQ, ThresholdCoefficients, SIGMA_FRAC_BITS};
use crate::transforms::{smooth2_point, teo_point};

/// Width of the threshold registers. Large enough for any 16-bit σ register
/// times the coefficients the calibration grid can produce.
pub const THRESHOLD_BITS: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HwConfig {
    pub input_bits: u32,
    pub smoothed_bits: u32,
    pub xteo_bits: u32,
    pub steo_bits: u32,
    pub rate_hz: f64,
    pub channels: usize,
    pub channels_per_block: usize,
    pub xteo_drop_lsbs: u32,
    pub steo_drop_lsbs: u32,
}

impl Default for HwConfig {
    fn default() -> Self {
        Self {
            input_bits: 7,
            smoothed_bits: 6,
            xteo_bits: 8,
            steo_bits: 9,
            rate_hz: 16_000.0,
            channels: 256,
            channels_per_block: 32,
            xteo_drop_lsbs: 7,
            steo_drop_lsbs: 6,
        }
    }
}

impl HwConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [
            ("input_bits", self.input_bits),
            ("smoothed_bits", self.smoothed_bits),
            ("xteo_bits", self.xteo_bits),
            ("steo_bits", self.steo_bits),
        ] {
            if !(2..=16).contains(&bits) {
                return Err(Error::invalid(format!("{name} must be in 2..=16, got {bits}")));
            }
        }
        if self.channels_per_block == 0 || self.channels % self.channels_per_block != 0 {
            return Err(Error::invalid(format!(
                "channels ({}) must be a multiple of channels_per_block ({})",
                self.channels, self.channels_per_block
            )));
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return Err(Error::invalid("rate_hz must be positive"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.channels / self.channels_per_block
    }

    fn fmt(bits: u32) -> FixedPointFormat {
        FixedPointFormat::signed(bits).expect("validated width")
    }

    pub fn input_format(&self) -> FixedPointFormat {
        Self::fmt(self.input_bits)
    }

    pub fn smoothed_format(&self) -> FixedPointFormat {
        Self::fmt(self.smoothed_bits)
    }

    pub fn xteo_format(&self) -> FixedPointFormat {
        Self::fmt(self.xteo_bits)
    }

    pub fn steo_format(&self) -> FixedPointFormat {
        Self::fmt(self.steo_bits)
    }

    /// σ register: smoothed value bits plus the fractional bits.
    pub fn sigma_format(&self) -> FixedPointFormat {
        Self::fmt(self.smoothed_bits + SIGMA_FRAC_BITS)
    }

    pub fn threshold_format(&self) -> FixedPointFormat {
        Self::fmt(THRESHOLD_BITS)
    }
}

/// One row of the internal trace, all values integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TraceRow {
    pub x: i64,
    pub s: i64,
    pub x_teo: i64,
    pub s_teo: i64,
    pub thr_x: i64,
    pub thr_s: i64,
    pub crossing: bool,
    /// σ register after the estimator consumed `s` (0 before seeding). Not
    /// part of the CSV trace.
    pub sigma_q: i64,
}

pub const TRACE_HEADER: &str = "x,s,x_teo,s_teo,thr_x,thr_s,crossing";

/// Register bank contents of one channel.
#[derive(Debug, Clone)]
pub struct ChannelState {
    cfg: HwConfig,
    x_prev2: i64,
    x_prev1: i64,
    s_prev2: i64,
    s_prev1: i64,
    tracker: AdaptiveThresholdQ,
    former: EventFormer<i64>,
    t: usize,
}

impl ChannelState {
    pub fn new(cfg: &HwConfig, coeffs: &ThresholdCoefficients, evt_cfg: &EventFormationConfig) -> Self {
        Self {
            cfg: *cfg,
            x_prev2: 0,
            x_prev1: 0,
            s_prev2: 0,
            s_prev1: 0,
            tracker: AdaptiveThresholdQ::new(*coeffs),
            former: EventFormer::new(*evt_cfg),
            t: 0,
        }
    }

    pub fn refractory_countdown(&self) -> usize {
        self.former.refractory_countdown(self.t)
    }

    pub fn sigma_q(&self) -> Option<i64> {
        self.tracker.sigma_q()
    }

    fn check_closure(&self, row: &TraceRow) {
        debug_assert!(self.cfg.input_format().contains(row.x), "x {} escapes its format", row.x);
        debug_assert!(self.cfg.smoothed_format().contains(row.s), "s {} escapes its format", row.s);
        debug_assert!(self.cfg.xteo_format().contains(row.x_teo), "x_teo {} escapes", row.x_teo);
        debug_assert!(self.cfg.steo_format().contains(row.s_teo), "s_teo {} escapes", row.s_teo);
        if let Some(sq) = self.tracker.sigma_q() {
            debug_assert!(self.cfg.sigma_format().contains(sq), "sigma {sq} escapes its format");
            let tf = self.cfg.threshold_format();
            debug_assert!(tf.contains(row.thr_x) && tf.contains(row.thr_s), "threshold escapes its format");
        }
        let _ = row;
    }

    /// Compare TEO index `k` (whose neighbours are already registered) with
    /// the thresholds in effect after the estimator consumed `s[k]`.
    fn evaluate(&mut self, k: usize, x: i64, s: i64, x_teo: i64, s_teo: i64, events: &mut Vec<usize>) -> TraceRow {
        let armed = self.tracker.armed();
        let thr = self.tracker.thresholds();
        let crossing = armed && (x_teo > thr.thr_x || s_teo > thr.thr_s);
        if crossing {
            if let Some(e) = self.former.push(k, x_teo) {
                events.push(e);
            }
        }
        let (thr_x, thr_s) = if self.tracker.sigma_q().is_some() {
            (thr.thr_x, thr.thr_s)
        } else {
            (0, 0)
        };
        let row = TraceRow {
            x,
            s,
            x_teo,
            s_teo,
            thr_x,
            thr_s,
            crossing,
            sigma_q: self.tracker.sigma_q().unwrap_or(0),
        };
        self.check_closure(&row);
        row
    }

    /// Clock in one input code. Emits the trace row for the previous sample
    /// (whose TEO needed this one) and any event that closed.
    pub fn push(&mut self, x: i64, events: &mut Vec<usize>) -> Option<TraceRow> {
        let cfg = self.cfg;
        debug_assert!(cfg.input_format().contains(x));
        let s = if self.t == 0 {
            smooth2_point(x, x, cfg.smoothed_format())
        } else {
            smooth2_point(self.x_prev1, x, cfg.smoothed_format())
        };

        let row = if self.t >= 1 {
            let k = self.t - 1;
            let (x_teo, s_teo) = if k >= 1 {
                (
                    truncate_to(teo_point(self.x_prev2, self.x_prev1, x), cfg.xteo_format(), cfg.xteo_drop_lsbs),
                    truncate_to(teo_point(self.s_prev2, self.s_prev1, s), cfg.steo_format(), cfg.steo_drop_lsbs),
                )
            } else {
                (0, 0)
            };
            Some(self.evaluate(k, self.x_prev1, self.s_prev1, x_teo, s_teo, events))
        } else {
            None
        };

        self.tracker.step(s);
        self.x_prev2 = self.x_prev1;
        self.x_prev1 = x;
        self.s_prev2 = self.s_prev1;
        self.s_prev1 = s;
        self.t += 1;
        row
    }

    /// Flush the last sample (TEO boundary value 0) and any open event.
    pub fn finish(&mut self, events: &mut Vec<usize>) -> Option<TraceRow> {
        let row = if self.t >= 1 {
            let k = self.t - 1;
            Some(self.evaluate(k, self.x_prev1, self.s_prev1, 0, 0, events))
        } else {
            None
        };
        if let Some(e) = self.former.finish() {
            events.push(e);
        }
        row
    }
}

fn check_input(q: &QuantizedRecord, cfg: &HwConfig) -> Result<()> {
    cfg.validate()?;
    if q.format().total_bits() != cfg.input_bits {
        return Err(Error::FormatMismatch(format!(
            "record is {}-bit, datapath expects {}-bit input",
            q.format().total_bits(),
            cfg.input_bits
        )));
    }
    if q.rate_hz() != cfg.rate_hz {
        return Err(Error::FormatMismatch(format!(
            "record sampled at {} Hz, datapath runs at {} Hz",
            q.rate_hz(),
            cfg.rate_hz
        )));
    }
    Ok(())
}

pub fn hw_detect_channel(
    q: &QuantizedRecord,
    cfg: &HwConfig,
    coeffs: &ThresholdCoefficients,
    evt_cfg: &EventFormationConfig,
) -> Result<SpikeEventList> {
    check_input(q, cfg)?;
    if q.len() <= WARMUP_SAMPLES {
        return Ok(SpikeEventList {
            events: Vec::new(),
            status: DetectStatus::ShorterThanWarmup,
        });
    }
    let mut state = ChannelState::new(cfg, coeffs, evt_cfg);
    let mut idx = Vec::new();
    for &x in q.codes() {
        state.push(x, &mut idx);
    }
    state.finish(&mut idx);
    Ok(to_list(idx, q.channel_id()))
}

fn to_list(idx: Vec<usize>, channel_id: u32) -> SpikeEventList {
    SpikeEventList::new(
        idx.into_iter()
            .map(|sample_index| SpikeEvent {
                channel_id,
                sample_index,
            })
            .collect(),
    )
}

/// Every intermediate integer of the datapath, one row per input sample.
pub fn trace_internal(q: &QuantizedRecord, cfg: &HwConfig, coeffs: &ThresholdCoefficients) -> Result<Vec<TraceRow>> {
    check_input(q, cfg)?;
    let evt_cfg = EventFormationConfig::for_rate(cfg.rate_hz);
    let mut state = ChannelState::new(cfg, coeffs, &evt_cfg);
    let mut sink = Vec::new();
    let mut rows = Vec::with_capacity(q.len());
    for &x in q.codes() {
        rows.extend(state.push(x, &mut sink));
    }
    rows.extend(state.finish(&mut sink));
    Ok(rows)
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 24 + TRACE_HEADER.len() + 1);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.x, r.s, r.x_teo, r.s_teo, r.thr_x, r.thr_s, r.crossing as u8
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Multichannel array
// ---------------------------------------------------------------------------

/// Frame-major interleaved code stream: sample t of channels 0..channels,
/// then sample t+1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterleavedStream {
    pub channels: usize,
    pub codes: Vec<i8>,
}

impl InterleavedStream {
    pub fn frames(&self) -> usize {
        self.codes.len() / self.channels.max(1)
    }

    /// Interleave equally long per-channel code sequences.
    pub fn interleave(per_channel: &[Vec<i64>]) -> Result<Self> {
        let channels = per_channel.len();
        let frames = per_channel.first().map_or(0, Vec::len);
        if per_channel.iter().any(|c| c.len() != frames) {
            return Err(Error::invalid("channels have different lengths"));
        }
        let mut codes = Vec::with_capacity(channels * frames);
        for t in 0..frames {
            for ch in per_channel {
                codes.push(i8::try_from(ch[t]).map_err(|_| Error::invalid(format!("code {} exceeds 8 bits", ch[t])))?);
            }
        }
        Ok(Self { channels, codes })
    }

    pub fn channel(&self, ch: usize) -> Vec<i64> {
        self.codes.iter().skip(ch).step_by(self.channels).map(|&c| c as i64).collect()
    }

    /// Raw signed bytes plus a `key=value` header next to it (`.hdr`).
    pub fn save(&self, path: &Path, rate_hz: f64, bits: u32) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let bytes: Vec<u8> = self.codes.iter().map(|&c| c as u8).collect();
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        let hdr = path.with_extension("hdr");
        let text = format!(
            "channels={}\nrate_hz={}\nbits={}\nframes={}\n",
            self.channels,
            rate_hz,
            bits,
            self.frames()
        );
        fs::write(&hdr, text).map_err(|e| Error::io(&hdr, e))
    }

    /// Returns the stream with its declared rate and bit width.
    pub fn load(path: &Path) -> Result<(Self, f64, u32)> {
        let hdr = path.with_extension("hdr");
        let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
        let (mut channels, mut rate, mut bits, mut frames) = (None, None, None, None);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&hdr, i + 1, "expected key=value"))?;
            let bad = || Error::parse(&hdr, i + 1, format!("invalid value {v:?}"));
            match k.trim() {
                "channels" => channels = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                "rate_hz" => rate = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
                "bits" => bits = Some(v.trim().parse::<u32>().map_err(|_| bad())?),
                "frames" => frames = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                other => return Err(Error::parse(&hdr, i + 1, format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::parse(&hdr, 0, format!("missing key {k}"));
        let channels = channels.ok_or_else(|| missing("channels"))?;
        let rate = rate.ok_or_else(|| missing("rate_hz"))?;
        let bits = bits.ok_or_else(|| missing("bits"))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if channels == 0 || bytes.len() % channels != 0 {
            return Err(Error::parse(path, 0, "byte count is not a whole number of frames"));
        }
        if let Some(f) = frames {
            if f * channels != bytes.len() {
                return Err(Error::parse(&hdr, 0, format!("header declares {f} frames, data holds {}", bytes.len() / channels)));
            }
        }
        let codes = bytes.into_iter().map(|b| b as i8).collect();
        Ok((Self { channels, codes }, rate, bits))
    }
}

/// Run the whole array. Blocks are independent and run in parallel; inside a
/// block channels are serviced round-robin, one sample each per frame.
pub fn hw_detect_multichannel(
    stream: &InterleavedStream,
    cfg: &HwConfig,
    coeffs: &ThresholdCoefficients,
    evt_cfg: &EventFormationConfig,
) -> Result<Vec<SpikeEventList>> {
    cfg.validate()?;
    if stream.channels != cfg.channels {
        return Err(Error::FormatMismatch(format!(
            "stream has {} channels, array has {}",
            stream.channels, cfg.channels
        )));
    }
    if stream.codes.len() % cfg.channels != 0 {
        return Err(Error::invalid(format!(
            "ragged stream: {} codes is not a multiple of {} channels",
            stream.codes.len(),
            cfg.channels
        )));
    }
    let input = cfg.input_format();
    if let Some(c) = stream.codes.iter().find(|&&c| !input.contains(c as i64)) {
        return Err(Error::FormatMismatch(format!("code {c} outside {}-bit input range", cfg.input_bits)));
    }
    let frames = stream.frames();
    let per_block = cfg.channels_per_block;

    let blocks: Vec<Vec<SpikeEventList>> = (0..cfg.blocks())
        .into_par_iter()
        .map(|b| {
            let base = b * per_block;
            let mut bank: Vec<ChannelState> = (0..per_block).map(|_| ChannelState::new(cfg, coeffs, evt_cfg)).collect();
            let mut events: Vec<Vec<usize>> = vec![Vec::new(); per_block];
            for t in 0..frames {
                let frame = &stream.codes[t * cfg.channels + base..t * cfg.channels + base + per_block];
                for (slot, (state, &code)) in bank.iter_mut().zip(frame).enumerate() {
                    state.push(code as i64, &mut events[slot]);
                }
            }
            bank.iter_mut()
                .zip(events)
                .enumerate()
                .map(|(slot, (state, mut ev))| {
                    state.finish(&mut ev);
                    let mut list = to_list(ev, (base + slot) as u32);
                    if frames <= WARMUP_SAMPLES {
                        list.status = DetectStatus::ShorterThanWarmup;
                    }
                    list
                })
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::threshold::Dyadic;

    fn coeffs() -> ThresholdCoefficients {
        ThresholdCoefficients::new(
            Dyadic::new(1, 0).unwrap(),
            Dyadic::new(1, 0).unwrap(),
            Dyadic::new(1, 4).unwrap(),
        )
    }

    fn qrec(codes: Vec<i64>) -> QuantizedRecord {
        QuantizedRecord::new(codes, FixedPointFormat::signed(7).unwrap(), 16_000.0, 0, 1.0).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_trace_and_no_events() {
        let cfg = HwConfig::default();
        let q = qrec(vec![0; 6000]);
        let ev = hw_detect_channel(&q, &cfg, &coeffs(), &EventFormationConfig::for_rate(16_000.0)).unwrap();
        assert!(ev.is_empty());
        let tr = trace_internal(&q, &cfg, &coeffs()).unwrap();
        assert_eq!(tr.len(), 6000);
        assert!(tr.iter().all(|r| *r == TraceRow::default()));
    }

    #[test]
    fn format_mismatch_rejected() {
        let cfg = HwConfig::default();
        let q8 = QuantizedRecord::new(vec![0; 10], FixedPointFormat::signed(8).unwrap(), 16_000.0, 0, 1.0).unwrap();
        let e = EventFormationConfig::for_rate(16_000.0);
        assert!(matches!(hw_detect_channel(&q8, &cfg, &coeffs(), &e), Err(Error::FormatMismatch(_))));
        let q24 = QuantizedRecord::new(vec![0; 10], FixedPointFormat::signed(7).unwrap(), 24_000.0, 0, 1.0).unwrap();
        assert!(matches!(hw_detect_channel(&q24, &cfg, &coeffs(), &e), Err(Error::FormatMismatch(_))));
    }

    #[test]
    fn trace_columns_match_independent_oracle() {
        let cfg = HwConfig::default();
        let codes: Vec<i64> = (0..3000).map(|k| ((k * 7919 + 13) % 127) as i64 - 64).collect();
        let q = qrec(codes.clone());
        let tr = trace_internal(&q, &cfg, &coeffs()).unwrap();
        let xs: Vec<i64> = tr.iter().map(|r| r.x).collect();
        assert_eq!(xs, codes);
        for k in 0..codes.len() {
            let s = if k == 0 { codes[0] } else { (codes[k] + codes[k - 1]).div_euclid(2) }.clamp(-32, 31);
            assert_eq!(tr[k].s, s);
            let want_x = if k == 0 || k + 1 == codes.len() {
                0
            } else {
                let e = codes[k] * codes[k] - codes[k + 1] * codes[k - 1];
                e.div_euclid(128).clamp(-128, 127)
            };
            assert_eq!(tr[k].x_teo, want_x, "k={k}");
        }
    }

    #[test]
    fn ragged_stream_rejected() {
        let cfg = HwConfig::default();
        let s = InterleavedStream {
            channels: 256,
            codes: vec![0; 257],
        };
        let e = EventFormationConfig::for_rate(16_000.0);
        assert!(hw_detect_multichannel(&s, &cfg, &coeffs(), &e).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(HwConfig::default().validate().is_ok());
        let bad = HwConfig {
            channels: 100,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stream_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mc.i8");
        let s = InterleavedStream::interleave(&[vec![1, -2, 3], vec![-64, 63, 0]]).unwrap();
        assert_eq!(s.codes, vec![1, -64, -2, 63, 3, 0]);
        assert_eq!(s.channel(1), vec![-64, 63, 0]);
        s.save(&p, 16_000.0, 7).unwrap();
        let (back, rate, bits) = InterleavedStream::load(&p).unwrap();
        assert_eq!((back, rate, bits), (s, 16_000.0, 7));
    }
}
