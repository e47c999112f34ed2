//! Prototype bank, parameter predictor and the differentiable objective.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encoder_input, EncoderConfig, EncoderOut, ParamBatch, PredictorWeights};
use crate::error::{Error, Result};
use crate::grad::check::{check, CheckReport};
use crate::grad::{NodeId, Tape, Tensor};
use crate::losses::{self, contrastive_scale, normalized_weights, LossReport, LossWeights, Mode};
use crate::math;
use crate::series::{Dataset, HyperParams, Mask, PrototypeBank, TimeSeries};
use crate::transform::{TransformParams, WarpBasis};

/// Curriculum stage: which transformations (and which loss terms) are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Prototypes only, no transformation.
    Prototypes,
    /// Time warping.
    Warp,
    /// Time warping and offset.
    Offset,
    /// Time warping, offset and the contrastive term (supervised only).
    Contrastive,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Prototypes, Stage::Warp, Stage::Offset, Stage::Contrastive];

    pub fn uses_warp(self) -> bool {
        self >= Stage::Warp
    }

    pub fn uses_offset(self) -> bool {
        self >= Stage::Offset
    }

    pub fn uses_contrastive(self) -> bool {
        self == Stage::Contrastive
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prototypes => "prototypes",
            Stage::Warp => "warp",
            Stage::Offset => "offset",
            Stage::Contrastive => "contrastive",
        }
    }

    /// Stages run for `mode`, up to and including `last`.
    pub fn schedule(mode: Mode, last: Stage) -> Vec<Stage> {
        let top = match mode {
            Mode::Unsupervised => last.min(Stage::Offset),
            Mode::Supervised => last,
        };
        Stage::ALL.iter().copied().filter(|s| *s <= top).collect()
    }
}

impl core::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Tape handles of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub loss: NodeId,
    pub bank: NodeId,
    pub encoder: Option<EncoderOut>,
    /// `[B, K]` masked reconstruction errors.
    pub errors: NodeId,
    pub report: LossReport,
}

/// Inputs of one batch in the layout the tape operations expect.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub series: Vec<TimeSeries>,
    /// `[B, T, C]` time-major values.
    pub values: Vec<f64>,
    /// `[B, T]` mask weights normalized per sample.
    pub weights: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl PackedBatch {
    pub fn new(series: Vec<TimeSeries>, masks: &[Mask], labels: Option<Vec<usize>>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut values = Vec::new();
        let mut weights = Vec::new();
        for (s, m) in series.iter().zip(masks) {
            values.extend_from_slice(s.values());
            weights.extend(normalized_weights(m)?);
        }
        Ok(Self { series, values, weights, labels })
    }

    pub fn from_dataset(d: &Dataset, idx: &[usize]) -> Result<Self> {
        let series = idx.iter().map(|&i| d.series[i].clone()).collect();
        let masks: Vec<Mask> = idx.iter().map(|&i| d.masks[i].clone()).collect();
        let labels = d.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Self::new(series, &masks, labels)
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

/// Full model state.
#[derive(Debug, Clone)]
pub struct Model {
    pub bank: PrototypeBank,
    pub encoder: PredictorWeights,
    pub basis: WarpBasis,
}

impl Model {
    pub fn new(bank: PrototypeBank, encoder: PredictorWeights, basis: WarpBasis) -> Result<Self> {
        let cfg = &encoder.config;
        if cfg.prototypes != bank.count() || cfg.channels != bank.channels() || cfg.landmarks != basis.landmarks() {
            return Err(Error::Shape("encoder, prototypes and warp basis disagree".into()));
        }
        if basis.len() != bank.len() {
            return Err(Error::Shape("warp basis length differs from prototype length".into()));
        }
        Ok(Self { bank, encoder, basis })
    }

    /// Model around `bank` with a freshly initialized predictor.
    pub fn init(bank: PrototypeBank, hp: &HyperParams, filters: [usize; 3], seed: u64) -> Result<Self> {
        let basis = WarpBasis::uniform(bank.len(), hp.landmarks)?;
        let mut cfg = EncoderConfig::new(bank.channels(), bank.count(), hp.landmarks).with_filters(filters);
        cfg.warp_scale = hp.warp_scale;
        let encoder = PredictorWeights::new(cfg, seed)?;
        Self::new(bank, encoder, basis)
    }

    pub fn prototypes(&self) -> usize {
        self.bank.count()
    }

    /// Records the objective for `batch` on `tape`, using fresh leaves for
    /// every weight.
    pub fn record(&self, tape: &mut Tape, batch: &PackedBatch, mode: Mode, stage: Stage, w: LossWeights, train: bool) -> Result<Forward> {
        let bank = tape.param(Tensor::new(vec![self.bank.count(), self.bank.len(), self.bank.channels()], self.bank.data().to_vec()));
        let enc = if stage.uses_warp() { Some(self.encoder.leaves(tape)) } else { None };
        self.record_with(tape, batch, mode, stage, w, train, bank, enc)
    }

    /// As [`Self::record`] with caller-provided weight nodes.
    #[allow(clippy::too_many_arguments)]
    pub fn record_with(
        &self,
        tape: &mut Tape,
        batch: &PackedBatch,
        mode: Mode,
        stage: Stage,
        w: LossWeights,
        train: bool,
        bank: NodeId,
        enc_params: Option<Vec<NodeId>>,
    ) -> Result<Forward> {
        let (k, len, ch) = (self.bank.count(), self.bank.len(), self.bank.channels());
        let bs = batch.len();
        if batch.values.len() != bs * len * ch {
            return Err(Error::Shape(format!("batch values do not match {len}x{ch} prototypes")));
        }
        let labels = match mode {
            Mode::Supervised => {
                let l = batch.labels.as_ref().ok_or(Error::InvalidArgument("supervised batch without labels".into()))?;
                if let Some(&bad) = l.iter().find(|&&y| y >= k) {
                    return Err(Error::LabelOutOfRange { label: bad + 1, classes: k });
                }
                Some(l.clone())
            }
            Mode::Unsupervised => None,
        };
        let base: Vec<f64> = (1..=len).map(|t| t as f64).collect();
        let (pos, encoder) = if stage.uses_warp() {
            let params = enc_params.ok_or(Error::InvalidArgument("warp stage needs encoder weights".into()))?;
            let input = encoder_input(&batch.series, ch)?;
            let out = self.encoder.forward_with(tape, input, params, train);
            let m = self.basis.landmarks();
            let mut grid_t = vec![0.0; m * len];
            for t in 0..len {
                for j in 0..m {
                    grid_t[j * len + t] = self.basis.grid()[t * m + j];
                }
            }
            let grid_t = tape.constant(Tensor::new(vec![m, len], grid_t));
            let d = tape.matmul(out.warp, grid_t);
            let base = tape.constant(Tensor::new(vec![len], base));
            let p = tape.add_bias(d, base);
            (tape.reshape(p, vec![bs, k, len]), Some(out))
        } else {
            let p = base.repeat(bs * k);
            (tape.constant(Tensor::new(vec![bs, k, len], p)), None)
        };
        let mut rec = tape.interp_gather(bank, pos);
        if stage.uses_offset() {
            let off = encoder.as_ref().expect("offset stage runs the encoder").offset;
            rec = tape.add_offset(rec, off);
        }
        let errors = tape.masked_sq_err(rec, &batch.values, &batch.weights);
        let err_vals = tape.value(errors).data.clone();
        let argmin: Vec<usize> = err_vals.chunks(k).map(math::argmin).collect();
        let per = match &labels {
            None => tape.min_rows(errors),
            Some(l) => tape.select_rows(errors, l),
        };
        let rec_loss = tape.mean(per);
        let tv = tape.total_variation(bank);
        let tv_w = tape.scale(tv, w.tv);
        let mut loss = tape.add(rec_loss, tv_w);
        let mut cont_val = 0.0;
        if let (Some(l), true) = (&labels, stage.uses_contrastive()) {
            let s = contrastive_scale(len, ch, w.cont_normalized);
            let neg = tape.scale(errors, -s);
            let lse = tape.log_sum_exp_rows(neg);
            let sel = tape.select_rows(errors, l);
            let sel = tape.scale(sel, s);
            let terms = tape.add(sel, lse);
            let cont = tape.mean(terms);
            cont_val = tape.value(cont).data[0];
            let cw = tape.scale(cont, w.cont);
            loss = tape.add(loss, cw);
        }
        let report = LossReport {
            rec: tape.value(rec_loss).data[0],
            tv: tape.value(tv).data[0],
            cont: cont_val,
            total: tape.value(loss).data[0],
            argmin,
        };
        Ok(Forward { loss, bank, encoder, errors, report })
    }

    /// Predicted parameters for `series`, with transformations that `stage`
    /// does not use reset to identity.
    pub fn params_for(&self, series: &[TimeSeries], stage: Stage) -> Result<ParamBatch> {
        let (c, m, k) = (self.bank.channels(), self.basis.landmarks(), self.bank.count());
        if !stage.uses_warp() {
            return Ok(vec![vec![TransformParams::identity(c, m); k]; series.len()]);
        }
        let mut p = self.encoder.predict_params(series)?;
        if !stage.uses_offset() {
            p.iter_mut().flatten().for_each(|t| t.offset.iter_mut().for_each(|v| *v = 0.0));
        }
        Ok(p)
    }

    /// Reconstruction error of every sample by every prototype, evaluated
    /// in chunks of `chunk` samples.
    pub fn errors(&self, data: &Dataset, stage: Stage, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let chunks: Vec<&[usize]> = idx.chunks(chunk.max(1)).collect();
        let run = |ids: &[usize]| -> Result<Vec<Vec<f64>>> {
            let sub = data.subset(ids);
            let params = self.params_for(&sub.series, stage)?;
            losses::error_table(&sub, &self.bank, &params, &self.basis)
        };
        #[cfg(feature = "parallel")]
        let parts: Vec<Result<Vec<Vec<f64>>>> = {
            use rayon::prelude::*;
            chunks.par_iter().map(|ids| run(ids)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<Result<Vec<Vec<f64>>>> = chunks.iter().map(|ids| run(ids)).collect();
        let mut out = Vec::with_capacity(data.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Index of the best-reconstructing prototype for every sample.
    pub fn assign(&self, data: &Dataset, stage: Stage, chunk: usize) -> Result<Vec<usize>> {
        Ok(self.errors(data, stage, chunk)?.iter().map(|r| math::argmin(r)).collect())
    }
}

/// Dimensions of one randomized gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckDims {
    pub len: usize,
    pub channels: usize,
    pub prototypes: usize,
    pub landmarks: usize,
    pub batch: usize,
}

impl CheckDims {
    /// Random dimensions with `T <= max_len`, `C <= 4`, `K <= 3`, `M <= 4`.
    pub fn random(rng: &mut impl Rng, max_len: usize) -> Self {
        let len = rng.random_range(8..=max_len.max(8));
        Self {
            len,
            channels: rng.random_range(1..=4),
            prototypes: rng.random_range(1..=3),
            landmarks: rng.random_range(2..=4),
            batch: rng.random_range(2..=4),
        }
    }
}

/// Gradient check of one objective at a random model and batch, against
/// central finite differences. The head is randomized so the encoder
/// receives a nonzero gradient. Per-input errors are reported in the order
/// prototypes, encoder tensors, head weight, head bias.
pub fn gradient_check(dims: CheckDims, mode: Mode, seed: u64, max_per_input: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let CheckDims { len, channels, prototypes, landmarks, batch } = dims;
    let hp = HyperParams { landmarks, prototypes, ..HyperParams::default() };
    let protos: Vec<f64> = (0..prototypes * len * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bank = PrototypeBank::new(prototypes, len, channels, protos)?;
    let mut model = Model::init(bank, &hp, [3, 4, 3], rng.random())?;
    model.encoder.head_w.data.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    model.encoder.head_b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    let series: Vec<TimeSeries> = (0..batch)
        .map(|_| TimeSeries::new(len, channels, (0..len * channels).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<Result<_>>()?;
    let masks: Vec<Mask> = (0..batch)
        .map(|_| {
            let mut w: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect();
            w[0] = 1.0;
            Mask::raw(w)
        })
        .collect();
    let labels = (0..batch).map(|_| rng.random_range(0..prototypes)).collect();
    let packed = PackedBatch::new(series, &masks, Some(labels))?;
    let stage = match mode {
        Mode::Unsupervised => Stage::Offset,
        Mode::Supervised => Stage::Contrastive,
    };
    let weights = LossWeights { tv: 1.0, cont: 0.01, cont_normalized: true };
    let mut inputs = vec![Tensor::new(vec![prototypes, len, channels], model.bank.data().to_vec())];
    inputs.extend(model.encoder.trainable_tensors());
    // errors surface through the closure only as panics; validate up front
    model.record(&mut Tape::new(), &packed, mode, stage, weights, true)?;
    Ok(check(
        &inputs,
        |tape, ids| {
            model
                .record_with(tape, &packed, mode, stage, weights, true, ids[0], Some(ids[1..].to_vec()))
                .expect("validated above")
                .loss
        },
        max_per_input,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PredictorWeights;

    fn toy(k: usize, len: usize, ch: usize) -> (Model, Dataset) {
        let protos: Vec<f64> = (0..k * len * ch).map(|v| (v as f64 * 0.61).sin()).collect();
        let bank = PrototypeBank::new(k, len, ch, protos).unwrap();
        let hp = HyperParams { landmarks: 3, prototypes: k, ..HyperParams::default() };
        let model = Model::init(bank, &hp, [3, 3, 3], 5).unwrap();
        let series: Vec<TimeSeries> = (0..6)
            .map(|i| TimeSeries::new(len, ch, (0..len * ch).map(|v| ((v + i) as f64 * 0.45).cos()).collect()).unwrap())
            .collect();
        let masks = (0..6).map(|i| Mask::raw((0..len).map(|t| if (t + i) % 4 == 0 { 0.0 } else { 1.0 }).collect())).collect();
        let labels = (0..6).map(|i| i % k).collect();
        (model, Dataset::new(series, masks, Some(labels)).with_classes(k))
    }

    #[test]
    fn tape_objective_matches_direct_losses() {
        let (mut model, data) = toy(3, 16, 2);
        model.encoder.head_w.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i as f64) * 0.37).sin());
        let idx: Vec<usize> = (0..data.len()).collect();
        let packed = PackedBatch::from_dataset(&data, &idx).unwrap();
        let params = model.params_for(&data.series, Stage::Contrastive).unwrap();
        for (mode, stage) in [(Mode::Unsupervised, Stage::Offset), (Mode::Supervised, Stage::Contrastive)] {
            let hp = HyperParams::default();
            let w = LossWeights::for_mode(mode, &hp);
            let f = model.record(&mut Tape::new(), &packed, mode, stage, w, false).unwrap();
            let direct = losses::loss_total(&data, &model.bank, &params, &model.basis, mode, w, stage.uses_contrastive()).unwrap();
            assert!((f.report.total - direct.total).abs() < 1e-9, "{mode:?}: {} vs {}", f.report.total, direct.total);
            assert!((f.report.cont - direct.cont).abs() < 1e-9);
            assert_eq!(f.report.argmin, direct.argmin);
        }
    }

    #[test]
    fn stage_gating() {
        let (mut model, data) = toy(2, 12, 1);
        model.encoder.head_b.iter_mut().for_each(|v| *v = 0.5);
        let p = model.params_for(&data.series, Stage::Prototypes).unwrap();
        assert!(p.iter().flatten().all(TransformParams::is_identity));
        let p = model.params_for(&data.series, Stage::Warp).unwrap();
        assert!(p.iter().flatten().all(|t| t.offset.iter().all(|&v| v == 0.0) && t.warp.iter().all(|&v| v != 0.0)));
        assert_eq!(Stage::schedule(Mode::Unsupervised, Stage::Contrastive).len(), 3);
        assert_eq!(Stage::schedule(Mode::Supervised, Stage::Contrastive).len(), 4);
    }

    #[test]
    fn model_rejects_mismatched_parts() {
        let bank = PrototypeBank::new(2, 10, 1, vec![0.0; 20]).unwrap();
        let enc = PredictorWeights::new(EncoderConfig::new(1, 3, 2), 0).unwrap();
        assert!(Model::new(bank, enc, WarpBasis::uniform(10, 2).unwrap()).is_err());
    }

    #[test]
    fn small_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..6 {
            let dims = CheckDims::random(&mut rng, 20);
            for mode in [Mode::Unsupervised, Mode::Supervised] {
                let r = gradient_check(dims, mode, seed, 6).unwrap();
                assert!(r.max_rel_err < 1e-3, "{dims:?} {mode:?}: {r:?}");
                assert!(r.checked > 0);
            }
        }
    }
}
