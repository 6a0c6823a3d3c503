//! Sample containers for analog-domain and quantized signals, plus the
//! floor/saturate primitives shared by every fixed-point stage.
//!
//! Rounding is always toward negative infinity (arithmetic right shift) and
//! out-of-range values saturate unless a format is explicitly built as
//! wrapping.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One channel of real-valued samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    samples: Vec<f64>,
    rate_hz: f64,
    channel_id: u32,
}

impl SignalRecord {
    pub fn new(samples: Vec<f64>, rate_hz: f64, channel_id: u32) -> Result<Self> {
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::invalid(format!("rate_hz must be positive, got {rate_hz}")));
        }
        if let Some(k) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {k} is not finite")));
        }
        Ok(Self {
            samples,
            rate_hz,
            channel_id,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn channel_id(&self) -> u32 {
        self.channel_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }

    /// Largest absolute amplitude, used as the per-record full scale.
    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Rounding mode of a fixed-point stage. Only floor is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    #[default]
    Floor,
}

/// Two's-complement fixed-point word description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointFormat {
    total_bits: u32,
    saturating: bool,
    rounding: Rounding,
}

impl FixedPointFormat {
    pub const MIN_BITS: u32 = 2;
    pub const MAX_BITS: u32 = 32;

    /// Signed saturating format of the given width.
    pub fn signed(total_bits: u32) -> Result<Self> {
        Self::with_overflow(total_bits, true)
    }

    pub fn with_overflow(total_bits: u32, saturating: bool) -> Result<Self> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&total_bits) {
            return Err(Error::invalid(format!(
                "total_bits must be in {}..={}, got {total_bits}",
                Self::MIN_BITS,
                Self::MAX_BITS
            )));
        }
        Ok(Self {
            total_bits,
            saturating,
            rounding: Rounding::Floor,
        })
    }

    /// 32-bit saturating format, wide enough that no pipeline value clips.
    pub fn wide() -> Self {
        Self {
            total_bits: Self::MAX_BITS,
            saturating: true,
            rounding: Rounding::Floor,
        }
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn signed_flag(&self) -> bool {
        true
    }

    pub fn saturating(&self) -> bool {
        self.saturating
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn min_code(&self) -> i64 {
        -(1_i64 << (self.total_bits - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1_i64 << (self.total_bits - 1)) - 1
    }

    /// 2^(total_bits-1): the code magnitude that corresponds to full scale.
    pub fn scale(&self) -> i64 {
        1_i64 << (self.total_bits - 1)
    }

    pub fn contains(&self, code: i64) -> bool {
        (self.min_code()..=self.max_code()).contains(&code)
    }

    /// Bring an arbitrary integer into range by saturation or wraparound.
    pub fn fit(&self, value: i64) -> i64 {
        if self.saturating {
            value.clamp(self.min_code(), self.max_code())
        } else {
            let modulus = 1_i128 << self.total_bits;
            let v = (value as i128 - self.min_code() as i128).rem_euclid(modulus);
            (v + self.min_code() as i128) as i64
        }
    }
}

/// Integer codes of one channel plus the mapping back to amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRecord {
    codes: Vec<i64>,
    format: FixedPointFormat,
    rate_hz: f64,
    channel_id: u32,
    full_scale: f64,
}

impl QuantizedRecord {
    pub fn new(
        codes: Vec<i64>,
        format: FixedPointFormat,
        rate_hz: f64,
        channel_id: u32,
        full_scale: f64,
    ) -> Result<Self> {
        if let Some(k) = codes.iter().position(|&c| !format.contains(c)) {
            return Err(Error::invalid(format!(
                "code {} at index {k} outside {}-bit range",
                codes[k],
                format.total_bits()
            )));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::invalid(format!("rate_hz must be positive, got {rate_hz}")));
        }
        if !(full_scale.is_finite() && full_scale > 0.0) {
            return Err(Error::invalid(format!("full_scale must be positive, got {full_scale}")));
        }
        Ok(Self {
            codes,
            format,
            rate_hz,
            channel_id,
            full_scale,
        })
    }

    pub fn codes(&self) -> &[i64] {
        &self.codes
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn channel_id(&self) -> u32 {
        self.channel_id
    }

    pub fn full_scale(&self) -> f64 {
        self.full_scale
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Map amplitudes to floor-rounded, range-limited codes.
pub fn quantize(
    record: &SignalRecord,
    format: FixedPointFormat,
    full_scale: f64,
) -> Result<QuantizedRecord> {
    if !(full_scale.is_finite() && full_scale > 0.0) {
        return Err(Error::invalid(format!("full_scale must be positive, got {full_scale}")));
    }
    let scale = format.scale() as f64;
    let step = full_scale / scale;
    let mut codes = Vec::with_capacity(record.len());
    for (k, &s) in record.samples().iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::invalid(format!("sample {k} is not finite")));
        }
        let raw = (s / full_scale * scale).floor();
        // clamp in f64 first so the cast cannot overflow
        let mut raw = raw.clamp(i64::MIN as f64 / 2.0, i64::MAX as f64 / 2.0) as i64;
        // settle rounding error against the reconstruction `code * step`
        if (raw + 1) as f64 * step <= s {
            raw += 1;
        } else if raw as f64 * step > s {
            raw -= 1;
        }
        codes.push(format.fit(raw));
    }
    QuantizedRecord::new(
        codes,
        format,
        record.rate_hz(),
        record.channel_id(),
        full_scale,
    )
}

/// Quantize with the per-record full scale (max |x|); an all-zero record
/// uses full scale 1.
pub fn quantize_normalized(record: &SignalRecord, format: FixedPointFormat) -> Result<QuantizedRecord> {
    let m = record.max_abs();
    quantize(record, format, if m > 0.0 { m } else { 1.0 })
}

pub fn dequantize(q: &QuantizedRecord) -> SignalRecord {
    let step = q.full_scale / q.format.scale() as f64;
    SignalRecord {
        samples: q.codes.iter().map(|&c| c as f64 * step).collect(),
        rate_hz: q.rate_hz,
        channel_id: q.channel_id,
    }
}

/// Drop `drop_lsbs` low bits with floor semantics, then fit into `target`.
pub fn truncate_to(value: i64, target: FixedPointFormat, drop_lsbs: u32) -> i64 {
    let shifted = if drop_lsbs >= 63 {
        if value < 0 {
            -1
        } else {
            0
        }
    } else {
        value >> drop_lsbs
    };
    target.fit(shifted)
}

// ---------------------------------------------------------------------------
// Record files: raw little-endian f32 or one-sample-per-line CSV, each with a
// `key=value` sidecar header next to it (same stem, `.hdr` extension).
// ---------------------------------------------------------------------------

/// Metadata stored in a record's sidecar header.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordHeader {
    pub rate_hz: f64,
    pub channel_id: u32,
    pub full_scale: f64,
    pub n_samples: usize,
}

pub fn header_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("hdr")
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false)
}

pub fn write_header(path: &Path, header: &RecordHeader) -> Result<()> {
    let text = format!(
        "rate_hz={}\nchannel_id={}\nfull_scale={}\nn_samples={}\n",
        header.rate_hz, header.channel_id, header.full_scale, header.n_samples
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<RecordHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rate_hz = None;
    let mut channel_id = None;
    let mut full_scale = None;
    let mut n_samples = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, lineno, "expected key=value"))?;
        let value = value.trim();
        let bad = |what: &str| Error::parse(path, lineno, format!("invalid {what}: {value:?}"));
        match key.trim() {
            "rate_hz" => rate_hz = Some(value.parse::<f64>().map_err(|_| bad("rate_hz"))?),
            "channel_id" => channel_id = Some(value.parse::<u32>().map_err(|_| bad("channel_id"))?),
            "full_scale" => full_scale = Some(value.parse::<f64>().map_err(|_| bad("full_scale"))?),
            "n_samples" => n_samples = Some(value.parse::<usize>().map_err(|_| bad("n_samples"))?),
            other => return Err(Error::parse(path, lineno, format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::parse(path, 0, format!("missing key {k}"));
    Ok(RecordHeader {
        rate_hz: rate_hz.ok_or_else(|| missing("rate_hz"))?,
        channel_id: channel_id.ok_or_else(|| missing("channel_id"))?,
        full_scale: full_scale.unwrap_or(1.0),
        n_samples: n_samples.ok_or_else(|| missing("n_samples"))?,
    })
}

/// Write samples (raw f32 LE, or CSV when the extension is `.csv`) plus header.
pub fn save_record(path: &Path, record: &SignalRecord, full_scale: f64) -> Result<()> {
    if is_csv(path) {
        let mut text = String::with_capacity(record.len() * 12);
        for s in record.samples() {
            text.push_str(&format!("{}\n", *s as f32));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    } else {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::with_capacity(record.len() * 4);
        for s in record.samples() {
            bytes.extend_from_slice(&(*s as f32).to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    write_header(
        &header_path(path),
        &RecordHeader {
            rate_hz: record.rate_hz(),
            channel_id: record.channel_id(),
            full_scale,
            n_samples: record.len(),
        },
    )
}

pub fn load_record(path: &Path) -> Result<SignalRecord> {
    let hdr_path = header_path(path);
    let header = read_header(&hdr_path)?;
    let samples: Vec<f64> = if is_csv(path) {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f32 = line
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("invalid sample {line:?}")))?;
            out.push(v as f64);
        }
        out
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::parse(
                path,
                0,
                format!("byte length {} is not a multiple of 4", bytes.len()),
            ));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect()
    };
    if samples.len() != header.n_samples {
        return Err(Error::parse(
            &hdr_path,
            0,
            format!(
                "header declares {} samples but data holds {}",
                header.n_samples,
                samples.len()
            ),
        ));
    }
    SignalRecord::new(samples, header.rate_hz, header.channel_id).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::parse(path, 0, msg),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(samples: Vec<f64>) -> SignalRecord {
        SignalRecord::new(samples, 24_000.0, 0).unwrap()
    }

    #[test]
    fn record_rejects_bad_inputs() {
        assert!(SignalRecord::new(vec![0.0], 0.0, 0).is_err());
        assert!(SignalRecord::new(vec![f64::NAN], 1.0, 0).is_err());
        assert!(SignalRecord::new(vec![f64::INFINITY], 1.0, 0).is_err());
    }

    #[test]
    fn quantize_examples() {
        let f7 = FixedPointFormat::signed(7).unwrap();
        let q = quantize(&rec(vec![0.0, 2.0, -0.5]), f7, 1.0).unwrap();
        assert_eq!(q.codes(), &[0, 63, -32]);
        assert!(quantize(&rec(vec![0.0]), f7, 0.0).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let f7 = FixedPointFormat::signed(7).unwrap();
        let q = QuantizedRecord::new(vec![0, 63], f7, 16_000.0, 3, 1.0).unwrap();
        let r = dequantize(&q);
        assert_eq!(r.samples(), &[0.0, 0.984375]);
        assert_eq!(r.channel_id(), 3);
        assert_eq!(r.rate_hz(), 16_000.0);
    }

    #[test]
    fn truncate_examples() {
        let wide = FixedPointFormat::wide();
        assert_eq!(truncate_to(5, wide, 0), 5);
        assert_eq!(truncate_to(-7, wide, 1), -4);
        assert_eq!(truncate_to(300, FixedPointFormat::signed(8).unwrap(), 0), 127);
        assert_eq!(truncate_to(-300, FixedPointFormat::signed(8).unwrap(), 0), -128);
    }

    #[test]
    fn format_ranges_and_wrap() {
        let f = FixedPointFormat::signed(7).unwrap();
        assert_eq!((f.min_code(), f.max_code()), (-64, 63));
        let w = FixedPointFormat::with_overflow(8, false).unwrap();
        assert_eq!(w.fit(128), -128);
        assert_eq!(w.fit(-129), 127);
        assert_eq!(w.fit(5), 5);
        assert!(FixedPointFormat::signed(1).is_err());
        assert!(FixedPointFormat::signed(33).is_err());
    }

    #[test]
    fn truncate_matches_floor_division_oracle() {
        let wide = FixedPointFormat::wide();
        for drop in 0..8u32 {
            let d = 1_i64 << drop;
            for v in (-(1_i64 << 20)..=(1_i64 << 20)).step_by(7) {
                assert_eq!(truncate_to(v, wide, drop), v.div_euclid(d), "v={v} drop={drop}");
            }
            for v in -1000..=1000 {
                assert_eq!(truncate_to(v, wide, drop), v.div_euclid(d));
            }
        }
    }

    proptest! {
        #[test]
        fn quantize_stays_in_range(
            xs in proptest::collection::vec(-10.0_f64..10.0, 1..64),
            bits in 2u32..=16,
            fs in 0.01_f64..5.0,
        ) {
            let f = FixedPointFormat::signed(bits).unwrap();
            let q = quantize(&rec(xs.clone()), f, fs).unwrap();
            prop_assert!(q.codes().iter().all(|&c| f.contains(c)));

            // one LSB of the clamped input
            let lsb = fs / f.scale() as f64;
            let back = dequantize(&q);
            let lo = f.min_code() as f64 * lsb;
            let hi = f.max_code() as f64 * lsb;
            for (x, y) in xs.iter().zip(back.samples()) {
                let clamped = x.clamp(lo, hi);
                prop_assert!((clamped - y).abs() <= lsb * (1.0 + 1e-9));
            }

            let again = quantize(&back, f, fs).unwrap();
            prop_assert_eq!(again.codes(), q.codes());
        }
    }

    #[test]
    fn raw_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = SignalRecord::new(vec![0.5, -0.25, 0.125, 1.0], 16_000.0, 7).unwrap();
        for name in ["r.f32", "r.csv"] {
            let p = dir.path().join(name);
            save_record(&p, &r, 1.0).unwrap();
            assert_eq!(load_record(&p).unwrap(), r);
        }
    }

    #[test]
    fn loader_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.f32");
        let r = SignalRecord::new(vec![0.5, -0.25], 16_000.0, 0).unwrap();
        save_record(&p, &r, 1.0).unwrap();
        fs::write(
            header_path(&p),
            "rate_hz=16000\nchannel_id=0\nfull_scale=1\nn_samples=3\n",
        )
        .unwrap();
        assert!(matches!(load_record(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn header_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.hdr");
        fs::write(&p, "rate_hz=16000\nchannel_id=abc\n").unwrap();
        match read_header(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
