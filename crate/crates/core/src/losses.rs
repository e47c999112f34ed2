//! Reconstruction, total-variation and contrastive objectives.
//!
//! These are the direct (tape-free) evaluations. The training path builds
//! the same quantities on a [`crate::grad::Tape`]; tests check that both
//! agree.

use alloc::format;
use alloc::vec::Vec;

use crate::encoder::ParamBatch;
use crate::error::{Error, Result};
use crate::math;
use crate::series::{Dataset, Mask, PrototypeBank, TimeSeries};
use crate::transform::{reconstruct, WarpBasis};

/// `(1/C) sum_t w[t] |x[t] - r[t]|^2` for time-major `x`, `r` and weights
/// that already sum to one.
#[inline]
pub fn weighted_sq_err(x: &[f64], r: &[f64], w: &[f64], channels: usize) -> f64 {
    let mut acc = 0.0;
    for (t, &wt) in w.iter().enumerate() {
        if wt == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for c in 0..channels {
            let d = x[t * channels + c] - r[t * channels + c];
            s += d * d;
        }
        acc += wt * s;
    }
    acc / channels as f64
}

/// Mask weights scaled to sum to one.
pub fn normalized_weights(m: &Mask) -> Result<Vec<f64>> {
    let mass = m.mass();
    if !(mass > 0.0) {
        return Err(Error::ZeroMassMask);
    }
    Ok(m.weights().iter().map(|w| w / mass).collect())
}

/// Weighted mean squared error between `x` and a reconstruction `r`.
/// With an all-ones mask this is the plain mean over `T * C` entries.
pub fn masked_mse(x: &TimeSeries, r: &TimeSeries, m: &Mask) -> Result<f64> {
    if x.len() != r.len() || x.channels() != r.channels() || m.len() != x.len() {
        return Err(Error::Shape("series, reconstruction and mask disagree".into()));
    }
    let w = normalized_weights(m)?;
    Ok(weighted_sq_err(x.values(), r.values(), &w, x.channels()))
}

/// Mean L2 norm of consecutive channel-vector differences over
/// `count x len x channels` values, divided by `K (T - 1) C`.
pub fn total_variation_raw(data: &[f64], count: usize, len: usize, channels: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..count {
        let p = &data[k * len * channels..(k + 1) * len * channels];
        for t in 0..len - 1 {
            let mut sq = 0.0;
            for c in 0..channels {
                let d = p[(t + 1) * channels + c] - p[t * channels + c];
                sq += d * d;
            }
            acc += math::sqrt(sq);
        }
    }
    acc / (count * (len - 1) * channels) as f64
}

pub fn loss_tv(bank: &PrototypeBank) -> f64 {
    total_variation_raw(bank.data(), bank.count(), bank.len(), bank.channels())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Unsupervised,
    Supervised,
}

impl core::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsup" | "unsupervised" => Ok(Self::Unsupervised),
            "sup" | "supervised" => Ok(Self::Supervised),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

/// Loss components for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub tv: f64,
    pub cont: f64,
    pub total: f64,
    /// Best-reconstructing prototype per sample.
    pub argmin: Vec<usize>,
}

/// `errors[i][k]`: masked reconstruction error of sample `i` by prototype `k`.
pub fn error_table(batch: &Dataset, bank: &PrototypeBank, params: &ParamBatch, basis: &WarpBasis) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if params.len() != batch.len() {
        return Err(Error::Shape(format!("{} parameter sets for {} samples", params.len(), batch.len())));
    }
    let mut out = Vec::with_capacity(batch.len());
    for (i, (x, m)) in batch.series.iter().zip(&batch.masks).enumerate() {
        if params[i].len() != bank.count() {
            return Err(Error::Shape("parameter sets do not match prototype count".into()));
        }
        let w = normalized_weights(m)?;
        let row = (0..bank.count())
            .map(|k| {
                let r = reconstruct(&bank.prototype(k), &params[i][k], basis)?;
                Ok(weighted_sq_err(x.values(), r.values(), &w, x.channels()))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

fn labels_of(batch: &Dataset, k: usize) -> Result<&[usize]> {
    let labels = batch.labels.as_deref().ok_or(Error::InvalidArgument("batch has no labels".into()))?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: bad + 1, classes: k });
    }
    Ok(labels)
}

/// Mean over the batch of the best prototype's error, with the winners.
pub fn loss_rec_unsup(batch: &Dataset, bank: &PrototypeBank, params: &ParamBatch, basis: &WarpBasis) -> Result<(f64, Vec<usize>)> {
    let table = error_table(batch, bank, params, basis)?;
    let argmin: Vec<usize> = table.iter().map(|r| math::argmin(r)).collect();
    let mean = table.iter().zip(&argmin).map(|(r, &k)| r[k]).sum::<f64>() / table.len() as f64;
    Ok((mean, argmin))
}

/// Mean error using each sample's true-class prototype.
pub fn loss_rec_sup(batch: &Dataset, bank: &PrototypeBank, params: &ParamBatch, basis: &WarpBasis) -> Result<f64> {
    let labels = labels_of(batch, bank.count())?;
    let table = error_table(batch, bank, params, basis)?;
    Ok(table.iter().zip(labels).map(|(r, &y)| r[y]).sum::<f64>() / table.len() as f64)
}

/// Scale turning a masked mean error into the distance the contrastive
/// softmax uses: the squared norm over all `T * C` entries, or the mean
/// itself when `normalized`.
pub fn contrastive_scale(len: usize, channels: usize, normalized: bool) -> f64 {
    if normalized {
        1.0
    } else {
        (len * channels) as f64
    }
}

/// Mean negative log-softmax of `-d` at the true class.
pub fn contrastive_from_table(table: &[Vec<f64>], labels: &[usize], scale: f64) -> f64 {
    let mut acc = 0.0;
    for (row, &y) in table.iter().zip(labels) {
        let neg: Vec<f64> = row.iter().map(|d| -scale * d).collect();
        acc += scale * row[y] + math::log_sum_exp(&neg);
    }
    acc / table.len() as f64
}

pub fn loss_contrastive(
    batch: &Dataset,
    bank: &PrototypeBank,
    params: &ParamBatch,
    basis: &WarpBasis,
    normalized: bool,
) -> Result<f64> {
    let labels = labels_of(batch, bank.count())?;
    let table = error_table(batch, bank, params, basis)?;
    Ok(contrastive_from_table(&table, labels, contrastive_scale(bank.len(), bank.channels(), normalized)))
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Total-variation weight (`lambda` unsupervised, `mu` supervised).
    pub tv: f64,
    /// Contrastive weight.
    pub cont: f64,
    pub cont_normalized: bool,
}

impl LossWeights {
    pub fn for_mode(mode: Mode, hp: &crate::series::HyperParams) -> Self {
        match mode {
            Mode::Unsupervised => Self { tv: hp.lambda, cont: 0.0, cont_normalized: hp.cont_normalized },
            Mode::Supervised => Self { tv: hp.mu, cont: hp.nu, cont_normalized: hp.cont_normalized },
        }
    }
}

/// Composite objective; the contrastive term only counts when
/// `contrastive` is set (the last curriculum stage, supervised only).
pub fn loss_total(
    batch: &Dataset,
    bank: &PrototypeBank,
    params: &ParamBatch,
    basis: &WarpBasis,
    mode: Mode,
    weights: LossWeights,
    contrastive: bool,
) -> Result<LossReport> {
    let table = error_table(batch, bank, params, basis)?;
    let argmin: Vec<usize> = table.iter().map(|r| math::argmin(r)).collect();
    let tv = loss_tv(bank);
    let n = table.len() as f64;
    let (rec, cont) = match mode {
        Mode::Unsupervised => (table.iter().zip(&argmin).map(|(r, &k)| r[k]).sum::<f64>() / n, 0.0),
        Mode::Supervised => {
            let labels = labels_of(batch, bank.count())?;
            let rec = table.iter().zip(labels).map(|(r, &y)| r[y]).sum::<f64>() / n;
            let cont = if contrastive {
                contrastive_from_table(&table, labels, contrastive_scale(bank.len(), bank.channels(), weights.cont_normalized))
            } else {
                0.0
            };
            (rec, cont)
        }
    };
    let mut total = rec + weights.tv * tv;
    if mode == Mode::Supervised && contrastive {
        total += weights.cont * cont;
    }
    Ok(LossReport { rec, tv, cont, total, argmin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::HyperParams;
    use crate::transform::TransformParams;
    use alloc::vec;

    fn ts(len: usize, ch: usize, v: &[f64]) -> TimeSeries {
        TimeSeries::new(len, ch, v.to_vec()).unwrap()
    }

    #[test]
    fn masked_mse_only_observed_stamp_counts() {
        // T = 3, C = 2, only t = 1 observed with residual (1, 1)
        let x = ts(3, 2, &[1.0, 1.0, 5.0, 5.0, -3.0, 2.0]);
        let r = ts(3, 2, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let m = Mask::raw(vec![1.0, 0.0, 0.0]);
        assert_eq!(masked_mse(&x, &r, &m).unwrap(), 1.0);
        assert_eq!(masked_mse(&x, &r, &Mask::raw(vec![0.0; 3])), Err(Error::ZeroMassMask));
    }

    #[test]
    fn full_mask_is_plain_mse() {
        let x = ts(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let r = ts(4, 2, &[0.5, 2.0, 2.0, 4.5, 5.0, 9.0, 7.0, 8.0]);
        let plain = x.values().iter().zip(r.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 8.0;
        assert!((masked_mse(&x, &r, &Mask::full(4)).unwrap() - plain).abs() < 1e-15);
    }

    #[test]
    fn tv_of_single_bump() {
        let bank = PrototypeBank::new(1, 3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(loss_tv(&bank), 1.0);
        let flat = PrototypeBank::new(2, 4, 2, vec![0.3; 16]).unwrap();
        assert_eq!(loss_tv(&flat), 0.0);
    }

    #[test]
    fn contrastive_closed_forms() {
        // d = (0, 10), true class 0: -log(1 / (1 + e^-10))
        let v = contrastive_from_table(&[vec![0.0, 10.0]], &[0], 1.0);
        assert!((v - math::ln(1.0 + math::exp(-10.0))).abs() < 1e-15);
        assert!((v - 4.5398899e-5).abs() < 1e-11);
        assert_eq!(contrastive_from_table(&[vec![3.0]], &[0], 1.0), 0.0);
        let eq = contrastive_from_table(&[vec![2.0; 5]], &[3], 1.0);
        assert!((eq - math::ln(5.0)).abs() < 1e-12);
    }

    #[test]
    fn composite_losses_at_identity() {
        let bank = PrototypeBank::new(2, 3, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let basis = WarpBasis::uniform(3, 2).unwrap();
        let batch = Dataset::new(
            vec![ts(3, 1, &[0.1, 0.1, 0.1]), ts(3, 1, &[1.0, 1.0, 0.0])],
            vec![Mask::full(3), Mask::full(3)],
            Some(vec![0, 1]),
        );
        let params = vec![vec![TransformParams::identity(1, 2); 2]; 2];
        let (rec, argmin) = loss_rec_unsup(&batch, &bank, &params, &basis).unwrap();
        assert_eq!(argmin, vec![0, 1]);
        assert!((rec - (0.01 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((loss_rec_sup(&batch, &bank, &params, &basis).unwrap() - rec).abs() < 1e-15);
        let hp = HyperParams::default();
        let sup = loss_total(&batch, &bank, &params, &basis, Mode::Supervised, LossWeights::for_mode(Mode::Supervised, &hp), true).unwrap();
        let cont = loss_contrastive(&batch, &bank, &params, &basis, false).unwrap();
        assert!((sup.total - (rec + hp.mu * loss_tv(&bank) + hp.nu * cont)).abs() < 1e-12);
        let unsup = loss_total(&batch, &bank, &params, &basis, Mode::Unsupervised, LossWeights::for_mode(Mode::Unsupervised, &hp), true).unwrap();
        assert_eq!(unsup.cont, 0.0);
        let unlabeled = Dataset::new(batch.series.clone(), batch.masks.clone(), None);
        assert!(loss_rec_sup(&unlabeled, &bank, &params, &basis).is_err());
    }
}
