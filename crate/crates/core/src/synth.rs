//! Synthetic labeled datasets: smooth class templates deformed by a random
//! smooth time shift and a per-channel offset, plus noise and missing stamps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::series::{Dataset, Mask, Split, TimeSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub len: usize,
    pub channels: usize,
    /// Maximum absolute time shift, in time steps.
    pub shift_range: f64,
    /// Maximum absolute per-channel offset.
    pub offset_range: f64,
    pub noise_sd: f64,
    /// Probability that a stamp is unobserved.
    pub missing_rate: f64,
    /// Constant added to every test-set shift.
    pub test_shift_bias: f64,
    /// Sinusoids per template channel (at most 3).
    pub components: usize,
    /// Highest sinusoid frequency, in cycles over the series.
    pub max_frequency: usize,
    /// Control points of each sample's shift curve.
    pub shift_knots: usize,
    /// Classes share levels, amplitudes and frequencies and differ in the
    /// phase of each sinusoid by up to this many radians; `PI` makes the
    /// classes independent.
    pub phase_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            n_train: 4000,
            n_test: 1000,
            len: 180,
            channels: 4,
            shift_range: 7.0,
            offset_range: 0.3,
            noise_sd: 0.05,
            missing_rate: 0.0,
            test_shift_bias: 0.0,
            components: 3,
            max_frequency: 4,
            shift_knots: 3,
            phase_spread: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth: {m}")));
        if self.classes < 2 {
            return bad("at least 2 classes");
        }
        if self.len < 2 || self.channels == 0 || self.n_train == 0 {
            return bad("need T >= 2, C >= 1, N >= 1");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing rate must lie in [0, 1)");
        }
        for (name, v) in [("shift range", self.shift_range), ("offset range", self.offset_range), ("noise", self.noise_sd)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.phase_spread >= 0.0) || !self.phase_spread.is_finite() {
            return bad("phase spread must be finite and >= 0");
        }
        if !self.test_shift_bias.is_finite() {
            return bad("test shift bias must be finite");
        }
        if !(1..=3).contains(&self.components) || self.max_frequency == 0 || self.shift_knots < 2 {
            return bad("1..=3 components, max frequency >= 1, shift knots >= 2");
        }
        Ok(())
    }
}

/// Sum of sinusoids for one class and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Wave {
    pub level: f64,
    /// `(amplitude, cycles over the series, phase)`
    pub terms: Vec<(f64, f64, f64)>,
}

impl Wave {
    /// Value at continuous 1-based time `t` of a series of length `len`.
    pub fn eval(&self, t: f64, len: usize) -> f64 {
        let u = (t - 1.0) / (len - 1) as f64;
        self.level + self.terms.iter().map(|&(a, f, p)| a * math::sin(2.0 * PI * f * u + p)).sum::<f64>()
    }
}

/// Generator parameters of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    /// Time shift at every stamp: the sample reads its template at `t + shift[t]`.
    pub shift: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
    /// `waves[class][channel]`
    pub waves: Vec<Vec<Wave>>,
    pub templates: Vec<TimeSeries>,
    pub train_truth: Vec<SampleTruth>,
    pub test_truth: Vec<SampleTruth>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Smooth curve through `knots` uniform control values, cosine-eased
/// between them so it never leaves their range.
fn eased(knots: &[f64], len: usize) -> Vec<f64> {
    let segs = (knots.len() - 1) as f64;
    (0..len)
        .map(|t| {
            let x = t as f64 / (len - 1).max(1) as f64 * segs;
            let i = (math::floor(x) as usize).min(knots.len() - 2);
            let f = x - i as f64;
            let e = 0.5 - 0.5 * math::cos(PI * f);
            knots[i] + e * (knots[i + 1] - knots[i])
        })
        .collect()
}

fn render(cfg: &SynthConfig, waves: &[Wave], truth: &SampleTruth) -> TimeSeries {
    let mut out = TimeSeries::zeros(cfg.len, cfg.channels);
    for t in 0..cfg.len {
        let pos = (t + 1) as f64 + truth.shift[t];
        for (c, w) in waves.iter().enumerate() {
            out.set(t, c, w.eval(pos, cfg.len) + truth.offset[c]);
        }
    }
    out
}

fn draw_split(cfg: &SynthConfig, waves: &[Vec<Wave>], n: usize, bias: f64, rng: &mut ChaCha8Rng) -> Result<(Dataset, Vec<SampleTruth>)> {
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let mut series = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        // balanced classes, order interleaved
        let y = i % cfg.classes;
        let r = cfg.shift_range;
        let knots: Vec<f64> = (0..cfg.shift_knots).map(|_| bias + if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 }).collect();
        let o = cfg.offset_range;
        let offset = (0..cfg.channels).map(|_| if o > 0.0 { rng.random_range(-o..=o) } else { 0.0 }).collect();
        let truth = SampleTruth { shift: eased(&knots, cfg.len), offset };
        let mut x = render(cfg, &waves[y], &truth);
        if cfg.noise_sd > 0.0 {
            x.values_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        let mut w: Vec<f64> = (0..cfg.len).map(|_| if rng.random_bool(cfg.missing_rate) { 0.0 } else { 1.0 }).collect();
        if w.iter().all(|&v| v == 0.0) {
            w[rng.random_range(0..cfg.len)] = 1.0;
        }
        for (t, &wt) in w.iter().enumerate() {
            if wt == 0.0 {
                for c in 0..cfg.channels {
                    x.set(t, c, 0.0);
                }
            }
        }
        series.push(x);
        masks.push(Mask::raw(w));
        labels.push(y);
        truths.push(truth);
    }
    Ok((Dataset::new(series, masks, Some(labels)).with_classes(cfg.classes), truths))
}

/// Draws templates, then train and test sets from separate random streams.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut trng = stream(cfg.seed, 0);
    let shared: Vec<Wave> = (0..cfg.channels)
        .map(|_| Wave {
            level: trng.random_range(-0.5..0.5),
            terms: (0..cfg.components)
                .map(|_| {
                    let amp = trng.random_range(0.3..1.0);
                    let freq = trng.random_range(1..=cfg.max_frequency) as f64;
                    (amp, freq, trng.random_range(0.0..2.0 * PI))
                })
                .collect(),
        })
        .collect();
    let spread = cfg.phase_spread;
    let waves: Vec<Vec<Wave>> = (0..cfg.classes)
        .map(|_| {
            shared
                .iter()
                .map(|w| Wave {
                    level: w.level,
                    terms: w
                        .terms
                        .iter()
                        .map(|&(a, f, p)| (a, f, p + if spread > 0.0 { trng.random_range(-spread..=spread) } else { 0.0 }))
                        .collect(),
                })
                .collect()
        })
        .collect();
    let flat = SampleTruth { shift: vec![0.0; cfg.len], offset: vec![0.0; cfg.channels] };
    let templates = waves.iter().map(|w| render(cfg, w, &flat)).collect();
    let (train, train_truth) = draw_split(cfg, &waves, cfg.n_train, 0.0, &mut stream(cfg.seed, 1))?;
    let (test, test_truth) = draw_split(cfg, &waves, cfg.n_test, cfg.test_shift_bias, &mut stream(cfg.seed, 2))?;
    Ok(SynthData {
        train: train.with_split(Split::Train),
        test: test.with_split(Split::Test),
        waves,
        templates,
        train_truth,
        test_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{ncc_fit, ncc_predict_all};
    use crate::eval::mean_accuracy;

    #[test]
    fn clean_samples_equal_templates() {
        let cfg = SynthConfig { n_train: 40, n_test: 20, shift_range: 0.0, offset_range: 0.0, noise_sd: 0.0, ..SynthConfig::default() };
        let d = generate(&cfg).unwrap();
        for (x, &y) in d.train.series.iter().zip(d.train.labels.as_ref().unwrap()) {
            assert_eq!(x, &d.templates[y]);
        }
        let m = ncc_fit(&d.train).unwrap();
        let pred = ncc_predict_all(&m, &d.test).unwrap();
        assert_eq!(mean_accuracy(&pred, d.test.labels.as_ref().unwrap(), 4).unwrap(), 1.0);
    }

    #[test]
    fn deterministic_and_streams_disjoint() {
        let cfg = SynthConfig { n_train: 10, n_test: 10, len: 30, ..SynthConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let bigger = SynthConfig { n_train: 20, ..cfg.clone() };
        // more training samples leave the test draw untouched
        assert_eq!(generate(&cfg).unwrap().test, generate(&bigger).unwrap().test);
    }

    #[test]
    fn ranges_respected() {
        let cfg = SynthConfig { n_train: 50, n_test: 50, len: 60, test_shift_bias: 3.0, missing_rate: 0.3, ..SynthConfig::default() };
        let d = generate(&cfg).unwrap();
        for t in &d.train_truth {
            assert!(t.shift.iter().all(|s| s.abs() <= 7.0) && t.offset.iter().all(|o| o.abs() <= 0.3));
        }
        for t in &d.test_truth {
            assert!(t.shift.iter().all(|s| (s - 3.0).abs() <= 7.0 + 1e-12));
        }
        assert!(crate::series::validate_dataset(&d.train).is_empty());
        assert!(d.train.masks.iter().all(|m| m.mass() > 0.0));
    }

    #[test]
    fn degenerate_configs_rejected() {
        assert!(generate(&SynthConfig { missing_rate: 1.0, ..SynthConfig::default() }).is_err());
        assert!(generate(&SynthConfig { classes: 1, ..SynthConfig::default() }).is_err());
    }
}
