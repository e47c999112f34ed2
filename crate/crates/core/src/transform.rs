//! Prototype deformations: a 1D thin-plate-spline time warp and a
//! per-channel offset.
//!
//! The warp `h` is the natural cubic spline
//! `h(t) = a + b t + sum_m w_m |t - t_m|^3` with `sum w_m = 0` and
//! `sum w_m t_m = 0`, interpolating `h(t_m) = t_m + shift_m`. The system
//! matrix depends only on the landmarks, so `h` is linear in the shifts and
//! [`WarpBasis`] caches `dh(t)/dshift_m` on the integer time grid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::math;
use crate::series::TimeSeries;

/// Landmark time steps on the 1-based day grid `1..=len`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpConfig {
    len: usize,
    landmarks: Vec<f64>,
}

impl WarpConfig {
    /// `count` uniformly spaced landmarks with `t_1 = 1`, `t_M = len`.
    pub fn uniform(len: usize, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 landmarks, got {count}")));
        }
        if len < 2 {
            return Err(Error::InvalidArgument(format!("series length {len} < 2")));
        }
        let step = (len - 1) as f64 / (count - 1) as f64;
        let mut landmarks: Vec<f64> = (0..count).map(|m| 1.0 + m as f64 * step).collect();
        landmarks[count - 1] = len as f64;
        Ok(Self { len, landmarks })
    }

    /// Arbitrary strictly increasing landmarks inside `[1, len]`.
    pub fn new(len: usize, landmarks: Vec<f64>) -> Result<Self> {
        if landmarks.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 landmarks".into()));
        }
        if landmarks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("landmarks must be strictly increasing".into()));
        }
        if landmarks[0] < 1.0 || *landmarks.last().unwrap() > len as f64 {
            return Err(Error::InvalidArgument("landmarks must lie in [1, len]".into()));
        }
        Ok(Self { len, landmarks })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn landmarks(&self) -> &[f64] {
        &self.landmarks
    }

    pub fn count(&self) -> usize {
        self.landmarks.len()
    }

    fn scale(&self) -> f64 {
        (self.len - 1) as f64
    }

    fn to_unit(&self, t: f64) -> f64 {
        (t - 1.0) / self.scale()
    }
}

/// Transformation parameters for one prototype and one input.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    /// Per-channel additive offset, in normalized intensity units.
    pub offset: Vec<f64>,
    /// Landmark shifts in days.
    pub warp: Vec<f64>,
}

impl TransformParams {
    pub fn identity(channels: usize, landmarks: usize) -> Self {
        Self { offset: vec![0.0; channels], warp: vec![0.0; landmarks] }
    }

    pub fn is_identity(&self) -> bool {
        self.offset.iter().chain(&self.warp).all(|&v| v == 0.0)
    }

    /// Checks the ranges the tanh heads guarantee.
    pub fn check_bounds(&self, warp_scale: f64) -> Result<()> {
        if self.offset.iter().any(|v| !(v.abs() <= 1.0)) {
            return Err(Error::InvalidArgument("offset outside [-1, 1]".into()));
        }
        if self.warp.iter().any(|v| !(v.abs() <= warp_scale)) {
            return Err(Error::InvalidArgument(format!("warp shift outside [-{warp_scale}, {warp_scale}]")));
        }
        Ok(())
    }
}

/// Cached spline system for one [`WarpConfig`].
#[derive(Debug, Clone)]
pub struct WarpBasis {
    cfg: WarpConfig,
    /// Inverse of the `(M+2)^2` system matrix in unit-interval coordinates.
    inverse: Vec<f64>,
    /// `grid[(t - 1) * M + m] = dh(t) / dshift_m` for integer `t`.
    grid: Vec<f64>,
}

impl WarpBasis {
    pub fn new(cfg: WarpConfig) -> Result<Self> {
        let m = cfg.count();
        let n = m + 2;
        let u: Vec<f64> = cfg.landmarks.iter().map(|&t| cfg.to_unit(t)).collect();
        // rows 0..M: interpolation, row M: sum w = 0, row M+1: sum w u = 0.
        // unknowns: w_0..w_{M-1}, a, b
        let mut a = vec![0.0; n * n];
        for i in 0..m {
            for j in 0..m {
                let r = (u[i] - u[j]).abs();
                a[i * n + j] = r * r * r;
            }
            a[i * n + m] = 1.0;
            a[i * n + m + 1] = u[i];
            a[m * n + i] = 1.0;
            a[(m + 1) * n + i] = u[i];
        }
        let inverse = Lu::factor(n, &a)?.inverse();
        let mut basis = Self { cfg, inverse, grid: Vec::new() };
        let len = basis.cfg.len;
        let mut grid = vec![0.0; len * m];
        for t in 0..len {
            let phi = basis.unit_basis(basis.cfg.to_unit((t + 1) as f64));
            for k in 0..m {
                // d h_unit / d rhs_k, where rhs_k = shift_k / scale; h = 1 + scale * h_unit
                grid[t * m + k] = (0..n).map(|j| phi[j] * basis.inverse[j * n + k]).sum();
            }
        }
        basis.grid = grid;
        Ok(basis)
    }

    pub fn uniform(len: usize, count: usize) -> Result<Self> {
        Self::new(WarpConfig::uniform(len, count)?)
    }

    pub fn config(&self) -> &WarpConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.cfg.len
    }

    pub fn landmarks(&self) -> usize {
        self.cfg.count()
    }

    /// `dh(t)/dshift_m` on the integer grid, row-major `T x M`.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn unit_basis(&self, u: f64) -> Vec<f64> {
        let m = self.cfg.count();
        let mut phi = Vec::with_capacity(m + 2);
        for &t in &self.cfg.landmarks {
            let r = (u - self.cfg.to_unit(t)).abs();
            phi.push(r * r * r);
        }
        phi.push(1.0);
        phi.push(u);
        phi
    }

    /// Fits the spline through `h(t_m) = t_m + shifts[m]`.
    pub fn fit(&self, shifts: &[f64]) -> Result<WarpFunction> {
        let m = self.cfg.count();
        if shifts.len() != m {
            return Err(Error::Shape(format!("expected {m} shifts, got {}", shifts.len())));
        }
        let n = m + 2;
        let scale = self.cfg.scale();
        // identity (w = 0, a = 0, b = 1) plus the response to the shifts
        let mut coef = vec![0.0; n];
        coef[m + 1] = 1.0;
        for (k, &s) in shifts.iter().enumerate() {
            let r = s / scale;
            if r != 0.0 {
                for j in 0..n {
                    coef[j] += self.inverse[j * n + k] * r;
                }
            }
        }
        Ok(WarpFunction {
            landmarks_unit: self.cfg.landmarks.iter().map(|&t| self.cfg.to_unit(t)).collect(),
            landmarks: self.cfg.landmarks.clone(),
            weights_unit: coef[..m].to_vec(),
            a_unit: coef[m],
            b_unit: coef[m + 1],
            scale,
        })
    }

    /// `h(t)` at every integer `t` in `1..=T`, via the cached grid.
    pub fn positions(&self, shifts: &[f64]) -> Vec<f64> {
        let m = self.cfg.count();
        debug_assert_eq!(shifts.len(), m);
        (0..self.cfg.len)
            .map(|t| {
                let row = &self.grid[t * m..(t + 1) * m];
                let d: f64 = row.iter().zip(shifts).map(|(g, s)| g * s).sum();
                (t + 1) as f64 + d
            })
            .collect()
    }
}

/// Fits the spline for a one-off configuration.
pub fn fit_warp(cfg: &WarpConfig, shifts: &[f64]) -> Result<WarpFunction> {
    WarpBasis::new(cfg.clone())?.fit(shifts)
}

/// A fitted 1D thin-plate spline.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpFunction {
    landmarks: Vec<f64>,
    landmarks_unit: Vec<f64>,
    weights_unit: Vec<f64>,
    a_unit: f64,
    b_unit: f64,
    scale: f64,
}

impl WarpFunction {
    /// Evaluates `h(t)` in days.
    pub fn eval(&self, t: f64) -> f64 {
        let u = (t - 1.0) / self.scale;
        let mut h = self.a_unit + self.b_unit * u;
        for (w, um) in self.weights_unit.iter().zip(&self.landmarks_unit) {
            let r = (u - um).abs();
            h += w * r * r * r;
        }
        1.0 + self.scale * h
    }

    pub fn landmarks(&self) -> &[f64] {
        &self.landmarks
    }

    /// Coefficients `(a, b, w)` of `h(t) = a + b t + sum_m w_m |t - t_m|^3`
    /// in day units.
    pub fn coefficients(&self) -> (f64, f64, Vec<f64>) {
        let s = self.scale;
        let a = 1.0 + s * self.a_unit - self.b_unit;
        let w = self.weights_unit.iter().map(|w| w / (s * s)).collect();
        (a, self.b_unit, w)
    }

    /// Radial weights in unit-interval coordinates, where the side
    /// conditions are well scaled.
    pub fn unit_weights(&self) -> &[f64] {
        &self.weights_unit
    }

    /// `(|sum w|, |sum w t|)` in unit-interval coordinates.
    pub fn side_conditions(&self) -> (f64, f64) {
        let s0: f64 = self.weights_unit.iter().sum();
        let s1: f64 = self.weights_unit.iter().zip(&self.landmarks_unit).map(|(w, u)| w * u).sum();
        (s0.abs(), s1.abs())
    }
}

/// Linear interpolation of row `pos` (1-based, clamped to `[1, T]`) of a
/// time-major `T x C` matrix into `out`.
#[inline]
pub fn sample_row(values: &[f64], len: usize, channels: usize, pos: f64, out: &mut [f64]) {
    let s = pos.clamp(1.0, len as f64) - 1.0;
    let i = math::floor(s) as usize;
    let frac = s - i as f64;
    if frac == 0.0 || i + 1 >= len {
        out.copy_from_slice(&values[i * channels..(i + 1) * channels]);
    } else {
        let (lo, hi) = (&values[i * channels..], &values[(i + 1) * channels..]);
        for c in 0..channels {
            out[c] = lo[c] + frac * (hi[c] - lo[c]);
        }
    }
}

/// Samples `p` at the warped positions given by `h` on the grid `1..=T`.
pub fn apply_time_warp(p: &TimeSeries, h: &WarpFunction) -> TimeSeries {
    let positions: Vec<f64> = (1..=p.len()).map(|t| h.eval(t as f64)).collect();
    warp_at(p, &positions)
}

/// Samples `p` at the given 1-based positions.
pub fn warp_at(p: &TimeSeries, positions: &[f64]) -> TimeSeries {
    let (len, ch) = (p.len(), p.channels());
    let mut out = TimeSeries::zeros(len, ch);
    for (t, &pos) in positions.iter().enumerate() {
        sample_row(p.values(), len, ch, pos, &mut out.values_mut()[t * ch..(t + 1) * ch]);
    }
    out
}

/// Adds a per-channel constant to every time step.
pub fn apply_offset(p: &TimeSeries, offset: &[f64]) -> TimeSeries {
    let mut out = p.clone();
    let ch = p.channels();
    for row in out.values_mut().chunks_mut(ch) {
        for (v, o) in row.iter_mut().zip(offset) {
            *v += o;
        }
    }
    out
}

/// Offset applied after the time warp.
pub fn reconstruct(p: &TimeSeries, params: &TransformParams, basis: &WarpBasis) -> Result<TimeSeries> {
    if p.len() != basis.len() || params.offset.len() != p.channels() || params.warp.len() != basis.landmarks() {
        return Err(Error::Shape("prototype, parameters and warp basis disagree".into()));
    }
    let warped = warp_at(p, &basis.positions(&params.warp));
    Ok(apply_offset(&warped, &params.offset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize, ch: usize) -> TimeSeries {
        TimeSeries::new(len, ch, (0..len * ch).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn zero_shifts_give_identity() {
        let basis = WarpBasis::uniform(30, 4).unwrap();
        let h = basis.fit(&[0.0; 4]).unwrap();
        let (a, b, w) = h.coefficients();
        assert_eq!((a, b), (0.0, 1.0));
        assert!(w.iter().all(|&v| v == 0.0));
        for t in 1..=30 {
            assert_eq!(h.eval(t as f64), t as f64);
        }
        assert_eq!(basis.positions(&[0.0; 4]), (1..=30).map(|t| t as f64).collect::<Vec<_>>());
    }

    #[test]
    fn three_landmark_demo_shifts() {
        let cfg = WarpConfig::uniform(365, 3).unwrap();
        let h = fit_warp(&cfg, &[-7.0, 0.0, 7.0]).unwrap();
        let lm = cfg.landmarks();
        assert!((h.eval(lm[0]) - (lm[0] - 7.0)).abs() < 1e-8);
        assert!((h.eval(lm[1]) - lm[1]).abs() < 1e-8);
        assert!((h.eval(lm[2]) - (lm[2] + 7.0)).abs() < 1e-8);
    }

    #[test]
    fn constant_shift_is_pure_translation() {
        let h = fit_warp(&WarpConfig::uniform(10, 2).unwrap(), &[2.0, 2.0]).unwrap();
        let (_, b, w) = h.coefficients();
        assert!((b - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| v.abs() < 1e-12));
        for t in 1..=10 {
            assert!((h.eval(t as f64) - (t as f64 + 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_matches_fitted_spline() {
        let basis = WarpBasis::uniform(50, 5).unwrap();
        let shifts = [1.5, -3.0, 6.5, 0.25, -7.0];
        let h = basis.fit(&shifts).unwrap();
        for (t, p) in basis.positions(&shifts).iter().enumerate() {
            assert!((h.eval((t + 1) as f64) - p).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_landmarks_rejected() {
        assert!(WarpConfig::new(10, vec![1.0, 5.0, 5.0, 10.0]).is_err());
        assert!(WarpConfig::uniform(10, 1).is_err());
    }

    #[test]
    fn warp_identity_half_step_and_clamp() {
        let p = ramp(10, 2);
        let id = fit_warp(&WarpConfig::uniform(10, 3).unwrap(), &[0.0; 3]).unwrap();
        assert_eq!(apply_time_warp(&p, &id), p);
        let half: Vec<f64> = (1..=10).map(|t| t as f64 + 0.5).collect();
        let w = warp_at(&p, &half);
        for t in 0..9 {
            for c in 0..2 {
                assert!((w.get(t, c) - 0.5 * (p.get(t, c) + p.get(t + 1, c))).abs() < 1e-12);
            }
        }
        let far: Vec<f64> = (1..=10).map(|t| t as f64 + 100.0).collect();
        let w = warp_at(&p, &far);
        for t in 0..10 {
            assert_eq!(w.row(t), p.row(9));
        }
    }

    #[test]
    fn offset_shifts_channels() {
        let p = ramp(6, 1);
        let o = apply_offset(&p, &[0.3]);
        for (a, b) in o.values().iter().zip(p.values()) {
            assert!((a - b - 0.3).abs() < 1e-12);
        }
        assert_eq!(apply_offset(&p, &[0.0]), p);
        let p2 = ramp(6, 2);
        let o2 = apply_offset(&p2, &[1.0, -1.0]);
        let mean = |s: &TimeSeries, c| s.channel(c).iter().sum::<f64>() / 6.0;
        assert!((mean(&o2, 0) - mean(&p2, 0) - 1.0).abs() < 1e-12);
        assert!((mean(&o2, 1) - mean(&p2, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruct_composition() {
        let basis = WarpBasis::uniform(12, 3).unwrap();
        let p = ramp(12, 2);
        let id = TransformParams::identity(2, 3);
        assert_eq!(reconstruct(&p, &id, &basis).unwrap(), p);
        let off = TransformParams { offset: vec![0.3, 0.3], warp: vec![0.0; 3] };
        assert_eq!(reconstruct(&p, &off, &basis).unwrap(), apply_offset(&p, &[0.3, 0.3]));
        let flat = TimeSeries::new(12, 2, [0.5, -1.0].repeat(12)).unwrap();
        let params = TransformParams { offset: vec![0.2, 0.1], warp: vec![3.0, -5.0, 6.0] };
        let r = reconstruct(&flat, &params, &basis).unwrap();
        for t in 0..12 {
            assert!((r.get(t, 0) - 0.7).abs() < 1e-12 && (r.get(t, 1) + 0.9).abs() < 1e-12);
        }
    }
}
