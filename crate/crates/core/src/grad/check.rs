//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values, so it is an
//! independent oracle for [`Tape::backward`]. Perturbations that change the
//! tape's branch signature (a rectifier flips, an argmin switches, an
//! interpolation position changes cell) straddle a kink and are skipped.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape, Tensor};

/// Finite-difference step used throughout.
pub const FD_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Worst relative error per checked input.
    pub per_input: Vec<f64>,
}

impl CheckReport {
    pub fn merge(&mut self, other: CheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if self.per_input.len() < other.per_input.len() {
            self.per_input.resize(other.per_input.len(), 0.0);
        }
        for (a, b) in self.per_input.iter_mut().zip(&other.per_input) {
            *a = a.max(*b);
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor], build: &F) -> (f64, u64)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &ids);
    (tape.value(out).data[0], tape.signature())
}

/// Compares analytic and numeric gradients of the scalar built by `build`
/// with respect to every input. At most `max_per_input` components of each
/// input are probed (evenly strided).
pub fn check<F>(inputs: &[Tensor], build: F, max_per_input: usize) -> CheckReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let sig0 = tape.signature();
    let grads = tape.backward(out).expect("scalar loss");
    let mut report = CheckReport { per_input: vec![0.0; inputs.len()], ..CheckReport::default() };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads.get(*id);
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = work[i].data[j];
            work[i].data[j] = orig + FD_STEP;
            let (fp, sp) = eval(&work, &build);
            work[i].data[j] = orig - FD_STEP;
            let (fm, sm) = eval(&work, &build);
            work[i].data[j] = orig;
            if sp != sig0 || sm != sig0 {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.get(j).copied().unwrap_or(0.0);
            let e = rel_err(a, numeric);
            report.max_rel_err = report.max_rel_err.max(e);
            report.per_input[i] = report.per_input[i].max(e);
            report.checked += 1;
        }
    }
    report
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum with fixed random weights, so every output component
/// contributes a distinct amount to the checked scalar.
fn project(tape: &mut Tape, node: NodeId, rng_seed: u64) -> NodeId {
    let shape = tape.shape(node).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = random_tensor(&mut rng, shape);
    let w = tape.constant(w);
    let p = tape.mul(node, w);
    tape.sum(p)
}

/// Names of the primitives covered by [`primitive_suite`].
pub const PRIMITIVES: [&str; 17] = [
    "add", "sub", "mul", "scale", "square", "tanh", "relu", "matmul", "add_bias", "columns", "conv1d",
    "batch_norm", "mean_last", "interp_gather", "add_offset", "masked_sq_err", "min_select_lse_tv",
];

/// Runs a randomized finite-difference check of every primitive on
/// `instances` random configurations each.
pub fn primitive_suite(instances: usize, seed: u64) -> Vec<(&'static str, CheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (pi, &name) in PRIMITIVES.iter().enumerate() {
        let mut total = CheckReport::default();
        for inst in 0..instances {
            let s = seed ^ ((pi as u64) << 32) ^ inst as u64;
            total.merge(check_primitive(name, &mut rng, s));
        }
        out.push((name, total));
    }
    out
}

fn check_primitive(name: &str, rng: &mut ChaCha8Rng, s: u64) -> CheckReport {
    let (b, k, t, c) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..9), rng.random_range(1..4));
    let n = rng.random_range(1..5);
    let m = rng.random_range(1..5);
    match name {
        "add" | "sub" | "mul" => {
            let x = random_tensor(rng, vec![n, m]);
            let y = random_tensor(rng, vec![n, m]);
            check(&[x, y], |tp, ids| {
                let z = match name {
                    "add" => tp.add(ids[0], ids[1]),
                    "sub" => tp.sub(ids[0], ids[1]),
                    _ => tp.mul(ids[0], ids[1]),
                };
                project(tp, z, s)
            }, 64)
        }
        "scale" => {
            let f = rng.random_range(-3.0..3.0);
            check(&[random_tensor(rng, vec![n, m])], |tp, ids| {
                let z = tp.scale(ids[0], f);
                project(tp, z, s)
            }, 64)
        }
        "square" => check(&[random_tensor(rng, vec![n, m])], |tp, ids| {
            let z = tp.square(ids[0]);
            project(tp, z, s)
        }, 64),
        "tanh" => check(&[random_tensor(rng, vec![n, m])], |tp, ids| {
            let z = tp.tanh(ids[0]);
            project(tp, z, s)
        }, 64),
        "relu" => check(&[random_tensor(rng, vec![n, m])], |tp, ids| {
            let z = tp.relu(ids[0]);
            project(tp, z, s)
        }, 64),
        "matmul" => {
            let p = rng.random_range(1..5);
            check(&[random_tensor(rng, vec![n, p]), random_tensor(rng, vec![p, m])], |tp, ids| {
                let z = tp.matmul(ids[0], ids[1]);
                project(tp, z, s)
            }, 64)
        }
        "add_bias" => check(&[random_tensor(rng, vec![n, m]), random_tensor(rng, vec![m])], |tp, ids| {
            let z = tp.add_bias(ids[0], ids[1]);
            project(tp, z, s)
        }, 64),
        "columns" => {
            let cols: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..m)).collect();
            check(&[random_tensor(rng, vec![n, m])], |tp, ids| {
                let z = tp.columns(ids[0], cols.clone());
                project(tp, z, s)
            }, 64)
        }
        "conv1d" => {
            let (ci, co, kw) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6));
            let len = rng.random_range(kw.max(2)..12);
            let inputs = [
                random_tensor(rng, vec![b, ci, len]),
                random_tensor(rng, vec![co, ci, kw]),
                random_tensor(rng, vec![co]),
            ];
            check(&inputs, |tp, ids| {
                let z = tp.conv1d(ids[0], ids[1], ids[2]);
                project(tp, z, s)
            }, 64)
        }
        "batch_norm" => {
            let f = rng.random_range(1..4);
            let len = rng.random_range(2..7);
            let inputs = [random_tensor(rng, vec![b + 1, f, len]), random_tensor(rng, vec![f]), random_tensor(rng, vec![f])];
            check(&inputs, |tp, ids| {
                let (z, _, _) = tp.batch_norm(ids[0], ids[1], ids[2], 1e-5);
                project(tp, z, s)
            }, 64)
        }
        "mean_last" => check(&[random_tensor(rng, vec![n, m, t])], |tp, ids| {
            let z = tp.mean_last(ids[0]);
            project(tp, z, s)
        }, 64),
        "interp_gather" => {
            let src = random_tensor(rng, vec![k, t, c]);
            // positions spread over and slightly beyond [1, T]
            let pos = Tensor::new(
                vec![b, k, t],
                (0..b * k * t).map(|_| rng.random_range(0.5..t as f64 + 0.5)).collect(),
            );
            check(&[src, pos], |tp, ids| {
                let z = tp.interp_gather(ids[0], ids[1]);
                project(tp, z, s)
            }, 64)
        }
        "add_offset" => check(&[random_tensor(rng, vec![b, k, t, c]), random_tensor(rng, vec![b, k, c])], |tp, ids| {
            let z = tp.add_offset(ids[0], ids[1]);
            project(tp, z, s)
        }, 64),
        "masked_sq_err" => {
            let x: Vec<f64> = (0..b * t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut w: Vec<f64> = (0..b * t).map(|_| rng.random_range(0.0..1.0)).collect();
            for row in w.chunks_mut(t) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            check(&[random_tensor(rng, vec![b, k, t, c])], |tp, ids| {
                let z = tp.masked_sq_err(ids[0], &x, &w);
                project(tp, z, s)
            }, 64)
        }
        _ => {
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let inputs = [random_tensor(rng, vec![b, k]), random_tensor(rng, vec![k, t, c])];
            check(&inputs, |tp, ids| {
                let mn = tp.min_rows(ids[0]);
                let sel = tp.select_rows(ids[0], &labels);
                let lse = tp.log_sum_exp_rows(ids[0]);
                let a = tp.add(mn, sel);
                let a = tp.add(a, lse);
                let a = project(tp, a, s);
                let tv = tp.total_variation(ids[1]);
                let total = tp.add(a, tv);
                let sq = tp.square(total);
                tp.mean(sq)
            }, 64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for (name, r) in primitive_suite(100, 7) {
            assert!(r.checked > 0, "{name}: nothing checked");
            assert!(r.max_rel_err < 1e-3, "{name}: max rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn quadratic_gradient_is_two_p() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let q = tape.param(Tensor::new(vec![2], vec![4.0, 4.0]));
        let sq = tape.square(p);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p), &[2.0, -4.0, 1.0]);
        // q never feeds the loss
        assert!(g.get(q).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let sq = tape.square(p);
        assert!(tape.backward(sq).is_err());
    }

    #[test]
    fn tanh_of_linear_matches_finite_differences() {
        let w = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]);
        let x = Tensor::new(vec![3, 1], vec![1.0, -1.5, 0.25]);
        let r = check(&[w, x], |tp, ids| {
            let y = tp.matmul(ids[0], ids[1]);
            let y = tp.tanh(y);
            tp.sum(y)
        }, 16);
        assert_eq!(r.checked, 9);
        assert!(r.max_rel_err < 1e-3);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::new(vec![2, 1, 5], (0..10).map(|v| (v as f64).sin()).collect()));
            let w = tape.param(Tensor::new(vec![2, 1, 3], vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6]));
            let b = tape.param(Tensor::new(vec![2], vec![0.0, 0.1]));
            let y = tape.conv1d(x, w, b);
            let y = tape.square(y);
            let l = tape.sum(y);
            let g = tape.backward(l).unwrap();
            (g.get(x).to_vec(), g.get(w).to_vec())
        };
        assert_eq!(run(), run());
    }
}
