//! Nearest class centroid, nearest neighbor and dynamic time warping.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{masked_mse, weighted_sq_err};
use crate::math;
use crate::series::{Dataset, Mask, PrototypeBank, TimeSeries};

/// One centroid per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    pub centroids: PrototypeBank,
}

impl CentroidModel {
    pub fn classes(&self) -> usize {
        self.centroids.count()
    }
}

/// Per-stamp weighted averages of the series in `members`, each stamp of
/// series `i` weighted by `m_i[t] / sum(m_i)`. Stamps no member observes
/// take `fallback` (or zero).
pub fn weighted_centroid(d: &Dataset, members: &[usize], fallback: Option<&[f64]>) -> Result<TimeSeries> {
    let (len, ch) = d.shape().ok_or(Error::Empty("dataset"))?;
    let mut acc = vec![0.0; len * ch];
    let mut mass = vec![0.0; len];
    for &i in members {
        let m = &d.masks[i];
        let total = m.mass();
        if !(total > 0.0) {
            continue;
        }
        let x = d.series[i].values();
        for (t, &w) in m.weights().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let w = w / total;
            mass[t] += w;
            for c in 0..ch {
                acc[t * ch + c] += w * x[t * ch + c];
            }
        }
    }
    for t in 0..len {
        for c in 0..ch {
            let j = t * ch + c;
            acc[j] = if mass[t] > 0.0 { acc[j] / mass[t] } else { fallback.map_or(0.0, |f| f[j]) };
        }
    }
    TimeSeries::new(len, ch, acc)
}

/// Class centroids of a labeled dataset.
pub fn ncc_fit(d: &Dataset) -> Result<CentroidModel> {
    let labels = d.labels.as_ref().ok_or(Error::InvalidArgument("nearest centroid needs labels".into()))?;
    let mut members = vec![Vec::new(); d.classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= d.classes {
            return Err(Error::LabelOutOfRange { label: y + 1, classes: d.classes });
        }
        members[y].push(i);
    }
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(k + 1));
    }
    let centroids = members.iter().map(|m| weighted_centroid(d, m, None)).collect::<Result<Vec<_>>>()?;
    Ok(CentroidModel { centroids: PrototypeBank::from_series(&centroids)? })
}

/// Masked error of `x` against every row of `bank`.
pub fn distances_to_bank(bank: &PrototypeBank, x: &TimeSeries, m: &Mask) -> Result<Vec<f64>> {
    if x.len() != bank.len() || x.channels() != bank.channels() || m.len() != x.len() {
        return Err(Error::Shape("query does not match centroid shape".into()));
    }
    let w = crate::losses::normalized_weights(m)?;
    Ok((0..bank.count()).map(|k| weighted_sq_err(x.values(), bank.slice(k), &w, x.channels())).collect())
}

/// Closest centroid, lowest index on ties.
pub fn ncc_predict(model: &CentroidModel, x: &TimeSeries, m: &Mask) -> Result<usize> {
    Ok(math::argmin(&distances_to_bank(&model.centroids, x, m)?))
}

pub fn ncc_predict_all(model: &CentroidModel, d: &Dataset) -> Result<Vec<usize>> {
    d.series.iter().zip(&d.masks).map(|(x, m)| ncc_predict(model, x, m)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Mean squared difference over stamps observed in both series.
    Euclidean,
    /// DTW on observed stamps, with an optional band half-width.
    Dtw { band: Option<usize> },
}

/// Accumulated squared-Euclidean cost of the optimal alignment, steps
/// (up, right, diagonal). With a band, cells farther than `band` from the
/// length-scaled diagonal are excluded.
pub fn dtw_rows(a: &[&[f64]], b: &[&[f64]], band: Option<usize>) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return f64::INFINITY;
    }
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        let (lo, hi) = match band {
            None => (1, m),
            Some(r) => {
                let center = if n == 1 { 1.0 } else { 1.0 + (i - 1) as f64 * (m - 1) as f64 / (n - 1) as f64 };
                let r = r as f64;
                (math::ceil(center - r).max(1.0) as usize, (math::floor(center + r) as usize).min(m))
            }
        };
        cur.iter_mut().for_each(|v| *v = f64::INFINITY);
        for j in lo..=hi {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            let c: f64 = a[i - 1].iter().zip(b[j - 1]).map(|(x, y)| (x - y) * (x - y)).sum();
            cur[j] = c + best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

pub fn dtw_distance(a: &TimeSeries, b: &TimeSeries, band: Option<usize>) -> f64 {
    let ra: Vec<&[f64]> = (0..a.len()).map(|t| a.row(t)).collect();
    let rb: Vec<&[f64]> = (0..b.len()).map(|t| b.row(t)).collect();
    dtw_rows(&ra, &rb, band)
}

/// DTW with unobserved stamps dropped from both series.
pub fn dtw_masked(a: &TimeSeries, ma: &Mask, b: &TimeSeries, mb: &Mask, band: Option<usize>) -> f64 {
    let ra: Vec<&[f64]> = (0..a.len()).filter(|&t| ma.weights()[t] > 0.0).map(|t| a.row(t)).collect();
    let rb: Vec<&[f64]> = (0..b.len()).filter(|&t| mb.weights()[t] > 0.0).map(|t| b.row(t)).collect();
    dtw_rows(&ra, &rb, band)
}

/// Mask-weighted mean squared error using the product of both masks;
/// infinite when no stamp is observed in both.
pub fn euclidean_masked(a: &TimeSeries, ma: &Mask, b: &TimeSeries, mb: &Mask) -> f64 {
    let w: Vec<f64> = ma.weights().iter().zip(mb.weights()).map(|(x, y)| x * y).collect();
    match masked_mse(a, b, &Mask::filtered(w)) {
        Ok(v) => v,
        Err(_) => f64::INFINITY,
    }
}

pub fn distance(metric: Metric, a: &TimeSeries, ma: &Mask, b: &TimeSeries, mb: &Mask) -> f64 {
    match metric {
        Metric::Euclidean => euclidean_masked(a, ma, b, mb),
        Metric::Dtw { band } => dtw_masked(a, ma, b, mb, band),
    }
}

/// Label of the nearest training series, lowest index on ties.
pub fn knn1_predict(train: &Dataset, x: &TimeSeries, m: &Mask, metric: Metric) -> Result<usize> {
    let labels = train.labels.as_ref().ok_or(Error::InvalidArgument("nearest neighbor needs labels".into()))?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let d: Vec<f64> = train.series.iter().zip(&train.masks).map(|(s, ms)| distance(metric, x, m, s, ms)).collect();
    Ok(labels[math::argmin(&d)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uni(v: &[f64]) -> TimeSeries {
        TimeSeries::univariate(v.to_vec()).unwrap()
    }

    #[test]
    fn complementary_masks_select_stamps() {
        let d = Dataset::new(
            vec![uni(&[1.0, 2.0, 3.0]), uni(&[10.0, 20.0, 30.0])],
            vec![Mask::raw(vec![1.0, 1.0, 0.0]), Mask::raw(vec![0.0, 0.0, 1.0])],
            Some(vec![0, 0]),
        );
        let m = ncc_fit(&d).unwrap();
        assert_eq!(m.centroids.slice(0), &[1.0, 2.0, 30.0]);
    }

    #[test]
    fn overlapping_masks_weight_by_inverse_mass() {
        // sample 0 observes 2 stamps (weight 1/2 each), sample 1 observes 1 (weight 1)
        let d = Dataset::new(
            vec![uni(&[0.0, 3.0]), uni(&[9.0, 6.0])],
            vec![Mask::raw(vec![1.0, 1.0]), Mask::raw(vec![0.0, 1.0])],
            Some(vec![0, 0]),
        );
        let c = ncc_fit(&d).unwrap();
        assert_eq!(c.centroids.slice(0)[0], 0.0);
        assert!((c.centroids.slice(0)[1] - (0.5 * 3.0 + 6.0) / 1.5).abs() < 1e-15);
    }

    #[test]
    fn empty_class_rejected() {
        let d = Dataset::new(vec![uni(&[1.0, 2.0])], vec![Mask::full(2)], Some(vec![1]));
        assert_eq!(ncc_fit(&d), Err(Error::EmptyClass(1)));
    }

    #[test]
    fn ncc_tie_goes_low() {
        let bank = PrototypeBank::new(2, 2, 1, vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
        let m = CentroidModel { centroids: bank };
        assert_eq!(ncc_predict(&m, &uni(&[0.0, 0.0]), &Mask::full(2)).unwrap(), 0);
        assert_eq!(ncc_predict(&m, &uni(&[0.9, 0.0]), &Mask::full(2)).unwrap(), 1);
    }

    #[test]
    fn dtw_examples() {
        let a = uni(&[0.0, 1.0, 0.0]);
        let b = uni(&[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(dtw_distance(&a, &b, None), 0.0);
        assert_eq!(dtw_distance(&a, &a, None), 0.0);
        let c = uni(&[1.0, 2.0, 0.5]);
        assert_eq!(dtw_distance(&a, &c, None), dtw_distance(&c, &a, None));
        // band 0 on equal lengths is the plain squared distance
        let e: f64 = a.values().iter().zip(c.values()).map(|(x, y)| (x - y) * (x - y)).sum();
        assert_eq!(dtw_distance(&a, &c, Some(0)), e);
    }

    #[test]
    fn dtw_prefers_shifted_copy() {
        let train = Dataset::new(
            vec![uni(&[0.0, 0.0, 1.0, 2.0, 0.0]), uni(&[0.0, 1.0, 0.0, 1.0, 0.0])],
            vec![Mask::full(5), Mask::full(5)],
            Some(vec![0, 1]),
        );
        let x = uni(&[0.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(knn1_predict(&train, &x, &Mask::full(5), Metric::Dtw { band: None }).unwrap(), 0);
        assert_eq!(knn1_predict(&train, &x, &Mask::full(5), Metric::Euclidean).unwrap(), 1);
    }
}
