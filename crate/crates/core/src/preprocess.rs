//! Cloud masking, gap filling, Gaussian filtering and normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::series::{ChannelStats, Dataset, Mask, TimeSeries};

/// Filtered mask weights below this count as "no data".
pub const MASK_EPS: f64 = 1e-6;

/// Gaussian kernels are cut off beyond this many standard deviations.
pub const KERNEL_RADIUS_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapFill {
    #[default]
    None,
    Previous,
    MovingAverage,
    Gaussian,
}

impl core::str::FromStr for GapFill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "previous" => Ok(Self::Previous),
            "movavg" | "moving_average" => Ok(Self::MovingAverage),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err(Error::InvalidArgument(format!("unknown gap fill mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub sigma: f64,
    /// Applied to training series (centroid and prototype estimation).
    pub gap_fill: GapFill,
    /// Gaussian-filter query series at assignment time.
    pub input_filtering: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { sigma: 7.0, gap_fill: GapFill::Gaussian, input_filtering: true }
    }
}

/// Masks out observed stamps whose `band` value exceeds `threshold`.
pub fn threshold_clouds(series: &TimeSeries, mask: &Mask, band: usize, threshold: f64) -> Result<Mask> {
    if band >= series.channels() {
        return Err(Error::InvalidArgument(format!(
            "band {band} out of range for {} channels",
            series.channels()
        )));
    }
    let weights = mask
        .weights()
        .iter()
        .enumerate()
        .map(|(t, &w)| if w > 0.0 && series.get(t, band) > threshold { 0.0 } else { w })
        .collect();
    Ok(if mask.is_raw() { Mask::raw(weights) } else { Mask::filtered(weights) })
}

/// Forward fill from the closest previous observation.
pub fn gap_fill_previous(x: &TimeSeries, m: &Mask) -> (TimeSeries, Mask) {
    let (len, ch) = (x.len(), x.channels());
    let mut out = TimeSeries::zeros(len, ch);
    let mut w = vec![0.0; len];
    let mut last: Option<usize> = None;
    for t in 0..len {
        if m.weights()[t] > 0.0 {
            last = Some(t);
        }
        if let Some(src) = last {
            for c in 0..ch {
                out.set(t, c, x.get(src, c));
            }
            w[t] = 1.0;
        }
    }
    (out, Mask::raw(w))
}

/// Unweighted average of the observations in a centered window of half-width
/// `round(sigma)`, clipped at the series boundaries.
pub fn gap_fill_moving_average(x: &TimeSeries, m: &Mask, sigma: f64) -> Result<(TimeSeries, Mask)> {
    if !(sigma >= 1.0) {
        return Err(Error::InvalidArgument(format!("moving average needs sigma >= 1, got {sigma}")));
    }
    let half = math::round(sigma) as usize;
    let width = (2 * half + 1) as f64;
    let (len, ch) = (x.len(), x.channels());
    let mut out = TimeSeries::zeros(len, ch);
    let mut w = vec![0.0; len];
    let mut acc = vec![0.0; ch];
    for t in 0..len {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(len - 1);
        let mut mass = 0.0;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for s in lo..=hi {
            let ws = m.weights()[s];
            if ws > 0.0 {
                mass += ws;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += ws * x.get(s, c);
                }
            }
        }
        let mt = mass / width;
        if mt > 0.0 {
            w[t] = mt;
            for (c, a) in acc.iter().enumerate() {
                out.set(t, c, a / width / mt);
            }
        }
    }
    Ok((out, Mask::filtered(w)))
}

/// Gaussian kernel value `exp(-(dt)^2 / (2 sigma^2))`.
#[inline]
pub fn gaussian_weight(dt: f64, sigma: f64) -> f64 {
    math::exp(-(dt * dt) / (2.0 * sigma * sigma))
}

/// Gaussian filtering of a series and its mask. The filtered series is the
/// kernel-weighted mean of observed values; stamps whose filtered mask
/// falls below [`MASK_EPS`] get value 0 and weight 0.
pub fn gaussian_filter(x: &TimeSeries, m: &Mask, sigma: f64) -> Result<(TimeSeries, Mask)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let (len, ch) = (x.len(), x.channels());
    let radius = math::floor(KERNEL_RADIUS_SIGMAS * sigma) as usize;
    let kernel: Vec<f64> = (0..=radius).map(|d| gaussian_weight(d as f64, sigma)).collect();
    let mut out = TimeSeries::zeros(len, ch);
    let mut w = vec![0.0; len];
    let mut acc = vec![0.0; ch];
    for t in 0..len {
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(len - 1);
        let mut mass = 0.0;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for s in lo..=hi {
            let ms = m.weights()[s];
            if ms > 0.0 {
                let g = kernel[t.abs_diff(s)] * ms;
                mass += g;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += g * x.get(s, c);
                }
            }
        }
        if mass >= MASK_EPS {
            w[t] = mass;
            for (c, a) in acc.iter().enumerate() {
                out.set(t, c, a / mass);
            }
        }
    }
    Ok((out, Mask::filtered(w)))
}

/// Dispatches on the gap filling mode.
pub fn gap_fill(mode: GapFill, x: &TimeSeries, m: &Mask, sigma: f64) -> Result<(TimeSeries, Mask)> {
    match mode {
        GapFill::None => Ok((x.clone(), m.clone())),
        GapFill::Previous => Ok(gap_fill_previous(x, m)),
        GapFill::MovingAverage => gap_fill_moving_average(x, m, sigma),
        GapFill::Gaussian => gaussian_filter(x, m, sigma),
    }
}

/// Applies [`gap_fill`] to every series of a dataset.
pub fn gap_fill_dataset(d: &Dataset, mode: GapFill, sigma: f64) -> Result<Dataset> {
    let mut out = d.clone();
    for (i, (s, m)) in d.series.iter().zip(&d.masks).enumerate() {
        let (s2, m2) = gap_fill(mode, s, m, sigma)?;
        out.series[i] = s2;
        out.masks[i] = m2;
    }
    Ok(out)
}

/// Mask-weighted per-channel mean and standard deviation. Zero-variance
/// channels are stored as the identity transform and reported in the
/// returned warnings.
pub fn channel_stats(train: &Dataset) -> Result<(ChannelStats, Vec<String>)> {
    let (_, ch) = train.shape().ok_or(Error::Empty("train split"))?;
    let mut sum_w = 0.0;
    let mut mean = vec![0.0; ch];
    for (s, m) in train.series.iter().zip(&train.masks) {
        for (t, &w) in m.weights().iter().enumerate() {
            if w > 0.0 {
                sum_w += w;
                for (c, mu) in mean.iter_mut().enumerate() {
                    *mu += w * s.get(t, c);
                }
            }
        }
    }
    if !(sum_w > 0.0) {
        return Err(Error::Empty("train split has no observed stamps"));
    }
    mean.iter_mut().for_each(|v| *v /= sum_w);
    let mut var = vec![0.0; ch];
    for (s, m) in train.series.iter().zip(&train.masks) {
        for (t, &w) in m.weights().iter().enumerate() {
            if w > 0.0 {
                for (c, v) in var.iter_mut().enumerate() {
                    let d = s.get(t, c) - mean[c];
                    *v += w * d * d;
                }
            }
        }
    }
    let mut warnings = Vec::new();
    let mut std = vec![1.0; ch];
    for c in 0..ch {
        let sd = math::sqrt(var[c] / sum_w);
        if sd > 1e-12 * (1.0 + mean[c].abs()) {
            std[c] = sd;
        } else {
            warnings.push(format!("channel {c} has zero variance; left unscaled"));
            mean[c] = 0.0;
        }
    }
    Ok((ChannelStats { mean, std }, warnings))
}

fn map_observed(d: &Dataset, f: impl Fn(f64, usize) -> f64) -> Dataset {
    let mut out = d.clone();
    for (s, m) in out.series.iter_mut().zip(&d.masks) {
        let ch = s.channels();
        for t in 0..s.len() {
            for c in 0..ch {
                let v = if m.weights()[t] > 0.0 { f(s.get(t, c), c) } else { 0.0 };
                s.set(t, c, v);
            }
        }
    }
    out
}

/// Standardizes every channel with train-split statistics. Unobserved
/// stamps keep the value 0.
pub fn normalize(d: &Dataset, stats: &ChannelStats) -> Dataset {
    let mut out = map_observed(d, |v, c| (v - stats.mean[c]) / stats.std[c]);
    out.stats = Some(stats.clone());
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(d: &Dataset, stats: &ChannelStats) -> Dataset {
    map_observed(d, |v, c| v * stats.std[c] + stats.mean[c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uni(v: &[f64]) -> TimeSeries {
        TimeSeries::univariate(v.to_vec()).unwrap()
    }

    #[test]
    fn clouds_thresholded_on_band() {
        let s = uni(&[0.1, 0.9, 0.2]);
        let m = threshold_clouds(&s, &Mask::full(3), 0, 0.5).unwrap();
        assert_eq!(m.weights(), &[1.0, 0.0, 1.0]);
        let m = threshold_clouds(&s, &Mask::full(3), 0, f64::INFINITY).unwrap();
        assert_eq!(m.weights(), &[1.0, 1.0, 1.0]);
        let m = threshold_clouds(&s, &Mask::raw(vec![0.0, 1.0, 1.0]), 0, 10.0).unwrap();
        assert_eq!(m.weights()[0], 0.0);
        assert!(threshold_clouds(&s, &Mask::full(3), 1, 0.5).is_err());
    }

    #[test]
    fn previous_forward_fills() {
        let (x, m) = gap_fill_previous(&uni(&[5.0, 0.0, 0.0, 9.0]), &Mask::raw(vec![1.0, 0.0, 0.0, 1.0]));
        assert_eq!(x.values(), &[5.0, 5.0, 5.0, 9.0]);
        assert_eq!(m.weights(), &[1.0; 4]);
        let (x, m) = gap_fill_previous(&uni(&[7.0, 3.0]), &Mask::raw(vec![0.0, 1.0]));
        assert_eq!(x.values(), &[0.0, 3.0]);
        assert_eq!(m.weights(), &[0.0, 1.0]);
        let s = uni(&[1.0, 2.0, 3.0]);
        assert_eq!(gap_fill_previous(&s, &Mask::full(3)).0, s);
    }

    #[test]
    fn moving_average_single_observation() {
        let (x, m) = gap_fill_moving_average(
            &uni(&[0.0, 0.0, 6.0, 0.0, 0.0, 0.0]),
            &Mask::raw(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
            1.0,
        )
        .unwrap();
        for t in 1..=3 {
            assert!((x.get(t, 0) - 6.0).abs() < 1e-12);
            assert!((m.weights()[t] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!((x.get(0, 0), m.weights()[0]), (0.0, 0.0));
        assert_eq!((x.get(5, 0), m.weights()[5]), (0.0, 0.0));
    }

    #[test]
    fn moving_average_constant_identity() {
        let s = uni(&[2.5; 9]);
        let (x, _) = gap_fill_moving_average(&s, &Mask::full(9), 2.0).unwrap();
        for v in x.values() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        assert!(gap_fill_moving_average(&s, &Mask::full(9), 0.5).is_err());
    }

    #[test]
    fn gaussian_single_observation() {
        let sigma = 2.0;
        let mut v = vec![0.0; 30];
        v[10] = 1.0;
        let mut w = vec![0.0; 30];
        w[10] = 1.0;
        let (x, m) = gaussian_filter(&uni(&v), &Mask::raw(w), sigma).unwrap();
        for t in 0..30 {
            let dt = t as f64 - 10.0;
            let expect = if dt.abs() <= 8.0 { libm::exp(-dt * dt / 8.0) } else { 0.0 };
            assert!((m.weights()[t] - expect).abs() < 1e-15, "t={t}");
            if m.weights()[t] >= MASK_EPS {
                assert!((x.get(t, 0) - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(x.get(t, 0), 0.0);
            }
        }
    }

    #[test]
    fn gaussian_degenerate_cases() {
        let (x, _) = gaussian_filter(&uni(&[3.0; 12]), &Mask::full(12), 7.0).unwrap();
        assert!(x.values().iter().all(|v| (v - 3.0).abs() < 1e-12));
        let (x, m) = gaussian_filter(&uni(&[3.0; 12]), &Mask::raw(vec![0.0; 12]), 7.0).unwrap();
        assert!(x.values().iter().all(|&v| v == 0.0));
        assert!(m.weights().iter().all(|&v| v == 0.0));
    }

    fn dataset(rows: &[&[f64]]) -> Dataset {
        Dataset::new(
            rows.iter().map(|r| TimeSeries::new(r.len() / 2, 2, r.to_vec()).unwrap()).collect(),
            rows.iter().map(|r| Mask::full(r.len() / 2)).collect(),
            None,
        )
    }

    #[test]
    fn normalize_round_trip_and_zero_mean() {
        let d = dataset(&[&[1.0, 10.0, 2.0, 30.0, 4.0, 20.0]]);
        let (stats, warnings) = channel_stats(&d).unwrap();
        assert!(warnings.is_empty());
        let n = normalize(&d, &stats);
        for c in 0..2 {
            let mean: f64 = n.series[0].channel(c).iter().sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-6);
        }
        let back = denormalize(&n, &stats);
        for (a, b) in back.series[0].values().iter().zip(d.series[0].values()) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }

    #[test]
    fn constant_channel_left_unchanged() {
        let d = dataset(&[&[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]]);
        let (stats, warnings) = channel_stats(&d).unwrap();
        assert_eq!(warnings.len(), 1);
        let n = normalize(&d, &stats);
        assert_eq!(n.series[0].channel(1), vec![5.0; 3]);
    }

    #[test]
    fn empty_train_split_rejected() {
        let d = Dataset::new(vec![], vec![], None);
        assert!(channel_stats(&d).is_err());
    }
}
