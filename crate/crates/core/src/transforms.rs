//! Teager energy operator and the two-sample smoother, each in a real-valued
//! and an integer (bit-exact) variant.

use std::ops::Deref;

use crate::signal::{truncate_to, FixedPointFormat};

/// TEO values aligned with the input; the first and last entries are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TeoOutput<T> {
    values: Vec<T>,
}

impl<T> TeoOutput<T> {
    pub fn into_vec(self) -> Vec<T> {
        self.values
    }
}

impl<T> Deref for TeoOutput<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.values
    }
}

/// `x[k]^2 - x[k+1]*x[k-1]` for interior samples, 0 at both edges.
pub fn teo(x: &[f64]) -> TeoOutput<f64> {
    let mut values = vec![0.0; x.len()];
    if x.len() >= 3 {
        for k in 1..x.len() - 1 {
            values[k] = x[k] * x[k] - x[k + 1] * x[k - 1];
        }
    }
    TeoOutput { values }
}

/// Mean of each sample and its predecessor; the first sample passes through.
pub fn smooth2(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        out.push(first);
        out.extend(x.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    }
    out
}

/// Exact integer TEO of one interior point.
#[inline]
pub fn teo_point(prev: i64, cur: i64, next: i64) -> i64 {
    cur * cur - next * prev
}

/// Integer TEO followed by floor truncation of `drop_lsbs` bits into
/// `out_format`. Inputs are expected to lie in `input_format`.
pub fn teo_fixed(
    x: &[i64],
    input_format: FixedPointFormat,
    out_format: FixedPointFormat,
    drop_lsbs: u32,
) -> TeoOutput<i64> {
    debug_assert!(x.iter().all(|&c| input_format.contains(c)));
    let mut values = vec![0; x.len()];
    if x.len() >= 3 {
        for k in 1..x.len() - 1 {
            values[k] = truncate_to(teo_point(x[k - 1], x[k], x[k + 1]), out_format, drop_lsbs);
        }
    }
    TeoOutput { values }
}

/// One smoother output: `(cur + prev) >> 1`, saturated into `out_format`.
#[inline]
pub fn smooth2_point(prev: i64, cur: i64, out_format: FixedPointFormat) -> i64 {
    truncate_to(cur + prev, out_format, 1)
}

/// Integer two-sample average with floor rounding, saturated into `out_format`.
pub fn smooth2_fixed(x: &[i64], out_format: FixedPointFormat) -> Vec<i64> {
    let mut out = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        out.push(smooth2_point(first, first, out_format));
        out.extend(x.windows(2).map(|w| smooth2_point(w[0], w[1], out_format)));
    }
    out
}
