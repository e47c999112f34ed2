//! Domain types shared by every other module: series, masks, datasets and
//! hyper-parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One pixel time series: `len` time steps by `channels` spectral bands,
/// stored time-major (`values[t * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    len: usize,
    channels: usize,
    values: Vec<f64>,
}

impl TimeSeries {
    /// Builds a series from time-major values. Only the shape is checked here;
    /// finiteness is reported by [`validate_dataset`].
    pub fn new(len: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if len < 2 {
            return Err(Error::Shape(format!("series length {len} < 2")));
        }
        if channels == 0 {
            return Err(Error::Shape("series has zero channels".into()));
        }
        if values.len() != len * channels {
            return Err(Error::Shape(format!(
                "expected {} values for T={len}, C={channels}, got {}",
                len * channels,
                values.len()
            )));
        }
        Ok(Self { len, channels, values })
    }

    pub fn zeros(len: usize, channels: usize) -> Self {
        Self { len, channels, values: vec![0.0; len * channels] }
    }

    /// Builds a univariate series.
    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Self::new(values.len(), 1, values)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at 0-based time index `t` and channel `c`.
    #[inline]
    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, v: f64) {
        self.values[t * self.channels + c] = v;
    }

    /// The channel vector at 0-based time index `t`.
    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-time-step observation weights. Raw masks are binary; filtered masks
/// carry smoothed real weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    weights: Vec<f64>,
    raw: bool,
}

impl Mask {
    pub fn raw(weights: Vec<f64>) -> Self {
        Self { weights, raw: true }
    }

    pub fn filtered(weights: Vec<f64>) -> Self {
        Self { weights, raw: false }
    }

    /// All time steps observed.
    pub fn full(len: usize) -> Self {
        Self::raw(vec![1.0; len])
    }

    /// Infers the raw flag from the values: binary masks are raw.
    pub fn infer(weights: Vec<f64>) -> Self {
        let raw = weights.iter().all(|&w| w == 0.0 || w == 1.0);
        Self { weights, raw }
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn is_raw(&self) -> bool {
        self.raw
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_observed(&self, t: usize) -> bool {
        self.weights[t] > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Per-channel mean and standard deviation, computed on the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A collection of equally shaped series with masks and optional labels.
///
/// Labels are stored 0-based; file formats and the CLI expose them 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: Vec<TimeSeries>,
    pub masks: Vec<Mask>,
    pub labels: Option<Vec<usize>>,
    /// Number of classes labels range over (0 when unlabeled).
    pub classes: usize,
    pub split: Split,
    pub stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(series: Vec<TimeSeries>, masks: Vec<Mask>, labels: Option<Vec<usize>>) -> Self {
        let classes = labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0);
        Self { series, masks, labels, classes, split: Split::Train, stats: None }
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// `(T, C)` of the first series.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.series.first().map(|s| (s.len(), s.channels()))
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Subset by indices, preserving order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            series: idx.iter().map(|&i| self.series[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            split: self.split,
            stats: self.stats.clone(),
        }
    }
}

/// `K` learnable prototypes of shape `T x C`, stored contiguously
/// (`data[(k * T + t) * C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PrototypeBank {
    pub fn new(count: usize, len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("prototype bank needs K >= 1".into()));
        }
        if data.len() != count * len * channels {
            return Err(Error::Shape(format!(
                "expected {} prototype values, got {}",
                count * len * channels,
                data.len()
            )));
        }
        Ok(Self { len, channels, data })
    }

    pub fn from_series(series: &[TimeSeries]) -> Result<Self> {
        let first = series.first().ok_or(Error::Empty("prototype list"))?;
        let (len, channels) = (first.len(), first.channels());
        if series.iter().any(|s| s.len() != len || s.channels() != channels) {
            return Err(Error::Shape("prototypes differ in shape".into()));
        }
        let data = series.iter().flat_map(|s| s.values().iter().copied()).collect();
        Self::new(series.len(), len, channels, data)
    }

    pub fn count(&self) -> usize {
        self.data.len() / (self.len * self.channels)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Time-major values of prototype `k`.
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.len * self.channels;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn prototype(&self, k: usize) -> TimeSeries {
        TimeSeries { len: self.len, channels: self.channels, values: self.slice(k).to_vec() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One broken invariant found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending series, or `None` for dataset-level problems.
    pub series: Option<usize>,
    pub rule: String,
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self.series {
            Some(i) => write!(f, "series {i}: {}", self.rule),
            None => write!(f, "dataset: {}", self.rule),
        }
    }
}

/// Checks every dataset invariant and reports violations as data.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |series: Option<usize>, rule: &str| {
        out.push(Violation { series, rule: rule.into() })
    };
    if d.series.is_empty() {
        push(None, "no series");
        return out;
    }
    if d.masks.len() != d.series.len() {
        push(None, "mask count differs from series count");
    }
    if let Some(labels) = &d.labels {
        if labels.len() != d.series.len() {
            push(None, "label count differs from series count");
        }
    }
    let (t0, c0) = (d.series[0].len(), d.series[0].channels());
    for (i, s) in d.series.iter().enumerate() {
        if s.len() != t0 {
            push(Some(i), "length mismatch");
        }
        if s.channels() != c0 {
            push(Some(i), "channel mismatch");
        }
        if !s.is_finite() {
            push(Some(i), "non-finite value");
        }
        if let Some(m) = d.masks.get(i) {
            if m.len() != s.len() {
                push(Some(i), "mask length mismatch");
            }
            let w = m.weights();
            if w.iter().any(|x| x.is_nan() || *x < 0.0 || x.is_infinite()) {
                push(Some(i), "negative or non-finite mask weight");
            }
            if m.is_raw() && w.iter().any(|&x| x != 0.0 && x != 1.0) {
                push(Some(i), "raw mask not binary");
            }
            if !w.iter().any(|&x| x > 0.0) {
                push(Some(i), "mask has no positive weight");
            }
        }
        if let Some(y) = d.label(i) {
            if y >= d.classes {
                push(Some(i), "label out of range");
            }
        }
    }
    out
}

/// Training hyper-parameters. Defaults follow the reference configuration
/// (one landmark per month, shifts of at most a week).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Total-variation weight, unsupervised objective.
    pub lambda: f64,
    /// Total-variation weight, supervised objective.
    pub mu: f64,
    /// Contrastive weight, supervised objective.
    pub nu: f64,
    /// Gaussian filter width in days.
    pub sigma: f64,
    pub learning_rate: f64,
    pub landmarks: usize,
    pub prototypes: usize,
    /// Maximum landmark shift in days.
    pub warp_scale: f64,
    pub patience: usize,
    pub batch_size: usize,
    /// Optimizer steps between validations.
    pub validation_interval: usize,
    /// Divide contrastive distances by `T * C`.
    pub cont_normalized: bool,
    /// Hard cap on optimizer steps across all stages.
    pub max_steps: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 1.0,
            nu: 0.01,
            sigma: 7.0,
            learning_rate: 1e-5,
            landmarks: 6,
            prototypes: 32,
            warp_scale: 7.0,
            patience: 5,
            batch_size: 2048,
            validation_interval: 200,
            cont_normalized: false,
            max_steps: 1_000_000,
        }
    }
}

impl HyperParams {
    /// Defaults with the landmark count derived from the series length.
    pub fn for_length(len: usize) -> Self {
        Self { landmarks: default_landmarks(len), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("nu", self.nu)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        let positive = [
            ("sigma", self.sigma),
            ("learning_rate", self.learning_rate),
            ("warp_scale", self.warp_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.landmarks < 2 {
            return Err(Error::InvalidArgument("at least 2 landmarks required".into()));
        }
        if self.prototypes == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("prototypes, patience, batch_size must be >= 1".into()));
        }
        if self.validation_interval == 0 {
            return Err(Error::InvalidArgument("validation_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// One landmark per 30 days, at least two.
pub fn default_landmarks(len: usize) -> usize {
    let m = crate::math::round(len as f64 / 30.0) as usize;
    m.max(2)
}

/// Per-class tallies behind overall and mean accuracy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// `matrix[truth][pred]`.
    pub matrix: Vec<Vec<usize>>,
    pub correct: usize,
    pub total: usize,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self { matrix: vec![vec![0; classes]; classes], correct: 0, total: 0 }
    }

    pub fn classes(&self) -> usize {
        self.matrix.len()
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.matrix[truth][pred] += 1;
        self.total += 1;
        if truth == pred {
            self.correct += 1;
        }
    }

    pub fn true_positives(&self, class: usize) -> usize {
        self.matrix[class][class]
    }

    pub fn false_negatives(&self, class: usize) -> usize {
        self.support(class) - self.true_positives(class)
    }

    pub fn support(&self, class: usize) -> usize {
        self.matrix[class].iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize) -> TimeSeries {
        TimeSeries::new(t, 2, (0..t * 2).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn consistent_dataset_has_no_violations() {
        let d = Dataset::new(
            vec![series(10), series(10), series(10)],
            vec![Mask::full(10), Mask::full(10), Mask::full(10)],
            Some(vec![0, 1, 0]),
        );
        assert!(validate_dataset(&d).is_empty());
    }

    #[test]
    fn length_mismatch_is_reported() {
        let d = Dataset::new(
            vec![series(10), series(5), series(10)],
            vec![Mask::full(10), Mask::full(5), Mask::full(10)],
            None,
        );
        let v = validate_dataset(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "series 1: length mismatch");
    }

    #[test]
    fn non_binary_raw_mask_is_reported() {
        let mut w = vec![1.0; 10];
        w[3] = 0.5;
        let d = Dataset::new(vec![series(10)], vec![Mask::raw(w)], None);
        let v = validate_dataset(&d);
        assert_eq!(v[0].to_string(), "series 0: raw mask not binary");
    }

    #[test]
    fn validation_is_total_on_garbage() {
        let mut s = series(4);
        s.values_mut()[0] = f64::NAN;
        s.values_mut()[1] = f64::INFINITY;
        let d = Dataset::new(
            vec![s],
            vec![Mask::raw(vec![f64::NAN, -1.0, 0.0])],
            Some(vec![3]),
        )
        .with_classes(2);
        let rules: Vec<_> = validate_dataset(&d).into_iter().map(|v| v.rule).collect();
        assert!(rules.contains(&"non-finite value".into()));
        assert!(rules.contains(&"mask length mismatch".into()));
        assert!(rules.contains(&"label out of range".into()));
    }

    #[test]
    fn default_landmarks_one_per_month() {
        assert_eq!(default_landmarks(365), 12);
        assert_eq!(default_landmarks(180), 6);
        assert_eq!(default_landmarks(20), 2);
    }

    #[test]
    fn defaults_validate() {
        let hp = HyperParams::default();
        assert_eq!(hp.lambda, 1.0);
        assert_eq!(hp.nu, 0.01);
        assert_eq!(hp.learning_rate, 1e-5);
        assert_eq!(hp.batch_size, 2048);
        hp.validate().unwrap();
    }
}
