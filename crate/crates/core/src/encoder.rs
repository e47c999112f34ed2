//! Fully convolutional predictor of per-prototype transformation
//! parameters.
//!
//! Three conv blocks (convolution, batch normalization, ReLU), global
//! average pooling over time and a linear head with `K * (C + M)` outputs
//! squashed by `tanh`. The head starts at zero so every prototype is
//! initially reproduced unchanged.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grad::{NodeId, Tape, Tensor};
use crate::math;
use crate::series::TimeSeries;
use crate::transform::TransformParams;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Predicted parameters, indexed `[sample][prototype]`.
pub type ParamBatch = Vec<Vec<TransformParams>>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub prototypes: usize,
    pub landmarks: usize,
    pub filters: [usize; 3],
    pub kernels: [usize; 3],
    pub warp_scale: f64,
}

impl EncoderConfig {
    pub fn new(channels: usize, prototypes: usize, landmarks: usize) -> Self {
        Self { channels, prototypes, landmarks, filters: [128, 256, 128], kernels: [8, 5, 3], warp_scale: 7.0 }
    }

    pub fn with_filters(mut self, filters: [usize; 3]) -> Self {
        self.filters = filters;
        self
    }

    /// Outputs per prototype: `C` offsets then `M` landmark shifts.
    pub fn per_prototype(&self) -> usize {
        self.channels + self.landmarks
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.prototypes == 0 || self.landmarks < 2 {
            return Err(Error::InvalidArgument("encoder needs C >= 1, K >= 1, M >= 2".into()));
        }
        if self.filters.contains(&0) || self.kernels.contains(&0) {
            return Err(Error::InvalidArgument("encoder filters and kernels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `[out, in, width]`
    pub weight: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    /// `[filters[2], K * (C + M)]`
    pub head_w: Tensor,
    pub head_b: Vec<f64>,
}

/// Tape handles of one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOut {
    /// Trainable leaves in [`PredictorWeights::trainable_mut`] order.
    pub params: Vec<NodeId>,
    /// `[B, K, C]`, in `[-1, 1]`.
    pub offset: NodeId,
    /// `[B * K, M]`, in `[-warp_scale, warp_scale]`.
    pub warp: NodeId,
    /// Per-block batch mean and variance (training mode only).
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PredictorWeights {
    /// He-initialized convolutions, unit batch-norm scale and a zero head.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(3);
        let mut fan_in = config.channels;
        for (&f, &kw) in config.filters.iter().zip(&config.kernels) {
            let std = math::sqrt(2.0 / (fan_in * kw) as f64);
            let data = (0..f * fan_in * kw)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            blocks.push(ConvBlock {
                weight: Tensor::new(vec![f, fan_in, kw], data),
                gamma: vec![1.0; f],
                beta: vec![0.0; f],
                running_mean: vec![0.0; f],
                running_var: vec![1.0; f],
            });
            fan_in = f;
        }
        let outs = config.prototypes * config.per_prototype();
        Ok(Self { head_w: Tensor::zeros(vec![fan_in, outs]), head_b: vec![0.0; outs], blocks, config })
    }

    /// Mutable views of every trainable tensor, in a fixed order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight.data);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.head_w.data);
        out.push(&mut self.head_b);
        out
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([b.weight.len(), b.gamma.len(), b.beta.len()]);
        }
        out.extend([self.head_w.len(), self.head_b.len()]);
        out
    }

    /// Every stored tensor with a stable name and shape, for checkpoints.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let f = b.gamma.len();
            out.push((format!("block{i}.weight"), b.weight.shape.clone(), &b.weight.data));
            out.push((format!("block{i}.gamma"), vec![f], &b.gamma));
            out.push((format!("block{i}.beta"), vec![f], &b.beta));
            out.push((format!("block{i}.running_mean"), vec![f], &b.running_mean));
            out.push((format!("block{i}.running_var"), vec![f], &b.running_var));
        }
        out.push(("head.weight".into(), self.head_w.shape.clone(), &self.head_w.data));
        out.push(("head.bias".into(), vec![self.head_b.len()], &self.head_b));
        out
    }

    /// Mutable counterpart of [`Self::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.weight"), &mut b.weight.data));
            out.push((format!("block{i}.gamma"), &mut b.gamma));
            out.push((format!("block{i}.beta"), &mut b.beta));
            out.push((format!("block{i}.running_mean"), &mut b.running_mean));
            out.push((format!("block{i}.running_var"), &mut b.running_var));
        }
        out.push(("head.weight".into(), &mut self.head_w.data));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Leaves for every trainable tensor, in [`Self::trainable_mut`] order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let f = b.gamma.len();
            out.push(tape.param(b.weight.clone()));
            out.push(tape.param(Tensor::new(vec![f], b.gamma.clone())));
            out.push(tape.param(Tensor::new(vec![f], b.beta.clone())));
        }
        out.push(tape.param(self.head_w.clone()));
        out.push(tape.param(Tensor::new(vec![self.head_b.len()], self.head_b.clone())));
        out
    }

    /// Records the forward pass with fresh leaves for the weights.
    pub fn forward(&self, tape: &mut Tape, input: Tensor, train: bool) -> EncoderOut {
        let params = self.leaves(tape);
        self.forward_with(tape, input, params, train)
    }

    /// Records the forward pass on the given weight nodes. In training mode
    /// batch statistics are used and returned; otherwise the running
    /// statistics are applied as constants.
    pub fn forward_with(&self, tape: &mut Tape, input: Tensor, params: Vec<NodeId>, train: bool) -> EncoderOut {
        let cfg = &self.config;
        let bs = input.shape[0];
        let len = input.shape[2];
        let mut x = tape.constant(input);
        let mut batch_stats = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let (w, gamma, beta) = (params[3 * i], params[3 * i + 1], params[3 * i + 2]);
            let f = b.gamma.len();
            let zero = tape.constant(Tensor::zeros(vec![f]));
            let conv = tape.conv1d(x, w, zero);
            let normed = if train {
                let (id, mean, var) = tape.batch_norm(conv, gamma, beta, BN_EPS);
                batch_stats.push((mean, var));
                id
            } else {
                let g = tape.value(gamma).data.clone();
                let be = tape.value(beta).data.clone();
                let mut out = tape.value(conv).data.clone();
                for bi in 0..bs {
                    for c in 0..f {
                        let inv = 1.0 / math::sqrt(b.running_var[c] + BN_EPS);
                        let row = &mut out[(bi * f + c) * len..(bi * f + c + 1) * len];
                        for o in row {
                            *o = g[c] * (*o - b.running_mean[c]) * inv + be[c];
                        }
                    }
                }
                tape.constant(Tensor::new(vec![bs, f, len], out))
            };
            x = tape.relu(normed);
        }
        let pooled = tape.mean_last(x);
        let (hw, hb) = (params[3 * self.blocks.len()], params[3 * self.blocks.len() + 1]);
        let lin = tape.matmul(pooled, hw);
        let lin = tape.add_bias(lin, hb);
        let act = tape.tanh(lin);
        let (k, c, m) = (cfg.prototypes, cfg.channels, cfg.landmarks);
        let per = cfg.per_prototype();
        let off_cols = (0..k).flat_map(|ki| (0..c).map(move |ci| ki * per + ci)).collect();
        let warp_cols = (0..k).flat_map(|ki| (0..m).map(move |mi| ki * per + c + mi)).collect();
        let offset = tape.columns(act, off_cols);
        let offset = tape.reshape(offset, vec![bs, k, c]);
        let warp = tape.columns(act, warp_cols);
        let warp = tape.reshape(warp, vec![bs * k, m]);
        let warp = tape.scale(warp, cfg.warp_scale);
        EncoderOut { params, offset, warp, batch_stats }
    }

    /// Trainable tensors as standalone values, [`Self::leaves`] order.
    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let f = b.gamma.len();
            out.push(b.weight.clone());
            out.push(Tensor::new(vec![f], b.gamma.clone()));
            out.push(Tensor::new(vec![f], b.beta.clone()));
        }
        out.push(self.head_w.clone());
        out.push(Tensor::new(vec![self.head_b.len()], self.head_b.clone()));
        out
    }

    /// Folds batch statistics into the running estimates. The variance is
    /// stored unbiased.
    pub fn update_running(&mut self, stats: &[(Vec<f64>, Vec<f64>)], samples: usize) {
        let n = samples as f64;
        let corr = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (b, (mean, var)) in self.blocks.iter_mut().zip(stats) {
            for c in 0..mean.len() {
                b.running_mean[c] = BN_MOMENTUM * b.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                b.running_var[c] = BN_MOMENTUM * b.running_var[c] + (1.0 - BN_MOMENTUM) * var[c] * corr;
            }
        }
    }

    /// Parameters for every sample and prototype, running statistics used.
    pub fn predict_params(&self, batch: &[TimeSeries]) -> Result<ParamBatch> {
        let input = encoder_input(batch, self.config.channels)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, false);
        Ok(unpack_params(&tape, &out, &self.config, batch.len()))
    }
}

/// Stacks time-major series into a channel-first `[B, C, T]` tensor.
pub fn encoder_input(batch: &[TimeSeries], channels: usize) -> Result<Tensor> {
    let first = batch.first().ok_or(Error::Empty("encoder batch"))?;
    let len = first.len();
    if batch.iter().any(|s| s.len() != len || s.channels() != channels) {
        return Err(Error::Shape(format!("encoder expects series of shape {len}x{channels}")));
    }
    let mut data = vec![0.0; batch.len() * channels * len];
    for (b, s) in batch.iter().enumerate() {
        for t in 0..len {
            for c in 0..channels {
                data[(b * channels + c) * len + t] = s.get(t, c);
            }
        }
    }
    Ok(Tensor::new(vec![batch.len(), channels, len], data))
}

/// Reads offset and warp nodes back into per-sample parameter sets.
pub fn unpack_params(tape: &Tape, out: &EncoderOut, cfg: &EncoderConfig, bs: usize) -> ParamBatch {
    let (k, c, m) = (cfg.prototypes, cfg.channels, cfg.landmarks);
    let off = &tape.value(out.offset).data;
    let warp = &tape.value(out.warp).data;
    (0..bs)
        .map(|b| {
            (0..k)
                .map(|ki| TransformParams {
                    offset: off[(b * k + ki) * c..(b * k + ki + 1) * c].to_vec(),
                    warp: warp[(b * k + ki) * m..(b * k + ki + 1) * m].to_vec(),
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, len: usize, ch: usize) -> Vec<TimeSeries> {
        (0..n)
            .map(|i| TimeSeries::new(len, ch, (0..len * ch).map(|v| ((v + 7 * i) as f64 * 0.3).sin()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn zero_head_predicts_identity() {
        let cfg = EncoderConfig::new(2, 3, 4).with_filters([4, 6, 4]);
        let w = PredictorWeights::new(cfg, 1).unwrap();
        let p = w.predict_params(&batch(5, 20, 2)).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().flatten().all(|t| t.is_identity() && t.offset.len() == 2 && t.warp.len() == 4));
    }

    #[test]
    fn outputs_are_bounded() {
        let cfg = EncoderConfig::new(1, 2, 3).with_filters([3, 3, 3]);
        let mut w = PredictorWeights::new(cfg, 2).unwrap();
        w.head_w.data.iter_mut().enumerate().for_each(|(i, v)| *v = 50.0 * ((i % 5) as f64 - 2.0));
        w.head_b.iter_mut().for_each(|v| *v = 9.0);
        for set in w.predict_params(&batch(3, 15, 1)).unwrap().iter().flatten() {
            assert!(set.offset.iter().all(|v| v.abs() <= 1.0));
            assert!(set.warp.iter().all(|v| v.abs() <= 7.0));
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let cfg = EncoderConfig::new(2, 2, 2).with_filters([4, 4, 4]);
        assert_eq!(PredictorWeights::new(cfg.clone(), 3).unwrap(), PredictorWeights::new(cfg.clone(), 3).unwrap());
        assert_ne!(PredictorWeights::new(cfg.clone(), 3).unwrap(), PredictorWeights::new(cfg, 4).unwrap());
    }

    #[test]
    fn running_stats_update() {
        let cfg = EncoderConfig::new(1, 1, 2).with_filters([2, 2, 2]);
        let mut w = PredictorWeights::new(cfg, 0).unwrap();
        let stats = vec![(vec![1.0, 1.0], vec![2.0, 2.0]); 3];
        w.update_running(&stats, 2);
        assert!((w.blocks[0].running_mean[0] - 0.1).abs() < 1e-12);
        assert!((w.blocks[0].running_var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }
}
