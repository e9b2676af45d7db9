#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use rand::Rng;
use trajectory_core::losses::{MarginSchedule, Outcome, SampleKey};

/// A random batch: rows of `dim` values keyed by patient and time point.
#[derive(Clone, Debug)]
pub struct RandomBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub keys: Vec<SampleKey>,
}

impl RandomBatch {
    pub fn dim(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    pub fn anchor_tensor(&self) -> Tensor {
        rows_to_tensor(&self.anchors)
    }

    pub fn positive_tensor(&self) -> Tensor {
        rows_to_tensor(&self.positives)
    }
}

pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu).unwrap()
}

pub fn gaussian_row<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    // Box-Muller; rows are later normalized so only the direction matters
    (0..dim)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0);
            let v: f64 = rng.random();
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect()
}

/// `patients` patients, each observed at a random non-empty subset of
/// `0..times` time points, with random labels.
pub fn random_batch<R: Rng>(rng: &mut R, patients: usize, times: usize, dim: usize) -> RandomBatch {
    let mut keys = Vec::new();
    for p in 0..patients {
        let label = if rng.random_bool(0.5) { Outcome::Pcr } else { Outcome::NoPcr };
        let mut present: Vec<usize> = (0..times).filter(|_| rng.random_bool(0.8)).collect();
        if present.is_empty() {
            present.push(rng.random_range(0..times));
        }
        for t in present {
            keys.push(SampleKey {
                patient: p,
                time_index: t,
                label,
            });
        }
    }
    let anchors = keys.iter().map(|_| gaussian_row(rng, dim)).collect();
    let positives = keys.iter().map(|_| gaussian_row(rng, dim)).collect();
    RandomBatch { anchors, positives, keys }
}

pub fn neg_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    -dot / (na * nb)
}

/// Row index of patient `i` at time `t`, if observed.
fn row_of(keys: &[SampleKey], i: usize, t: usize) -> Option<usize> {
    keys.iter().position(|k| k.patient == i && k.time_index == t)
}

/// Triple loop over (i, t, t'): the hinge of every anchor against every other
/// time point of the same patient.
pub fn naive_triplet(batch: &RandomBatch, step: f64, times: usize) -> (f64, usize) {
    let patients = batch.keys.iter().map(|k| k.patient + 1).max().unwrap_or(0);
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..patients {
        for t in 0..times {
            for tp in 0..times {
                if t == tp {
                    continue;
                }
                let (Some(a), Some(n)) = (row_of(&batch.keys, i, t), row_of(&batch.keys, i, tp)) else {
                    continue;
                };
                let margin = step * (t as f64 - tp as f64).abs();
                let d_ap = neg_cos(&batch.anchors[a], &batch.positives[a]);
                let d_an = neg_cos(&batch.anchors[a], &batch.anchors[n]);
                total += (d_ap - d_an + margin).max(0.0);
                count += 1;
            }
        }
    }
    (total, count)
}

/// Double loop over (i, j) per time point, gated on both labels.
pub fn naive_alignment(batch: &RandomBatch, times: usize, all_labels: bool) -> (f64, usize) {
    let patients = batch.keys.iter().map(|k| k.patient + 1).max().unwrap_or(0);
    let label = |p: usize| batch.keys.iter().find(|k| k.patient == p).unwrap().label;
    let mut total = 0.0;
    let mut count = 0;
    for t in 0..times {
        for i in 0..patients {
            for j in 0..patients {
                if i == j {
                    continue;
                }
                let gate = all_labels || (label(i) == Outcome::Pcr && label(j) == Outcome::Pcr);
                if !gate {
                    continue;
                }
                if let (Some(a), Some(b)) = (row_of(&batch.keys, i, t), row_of(&batch.keys, j, t)) {
                    total += neg_cos(&batch.anchors[a], &batch.anchors[b]);
                    count += 1;
                }
            }
        }
    }
    (total, count)
}

/// Smallest |hinge argument| over all triplets; gradient checks reject
/// instances closer than 1e-3 to the kink.
pub fn min_hinge_gap(batch: &RandomBatch, schedule: &MarginSchedule) -> f64 {
    let mut gap = f64::INFINITY;
    for (a, ka) in batch.keys.iter().enumerate() {
        for (n, kn) in batch.keys.iter().enumerate() {
            if ka.patient == kn.patient && ka.time_index != kn.time_index {
                let m = (schedule.encode(ka.time_index) - schedule.encode(kn.time_index)).abs();
                let arg = neg_cos(&batch.anchors[a], &batch.positives[a]) - neg_cos(&batch.anchors[a], &batch.anchors[n]) + m;
                gap = gap.min(arg.abs());
            }
        }
    }
    gap
}

/// Norm-wise relative error between the autograd gradient and central
/// differences of `f` at every input in `inputs`.
pub fn gradient_relative_error(inputs: &[Tensor], h: f64, f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let as_tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&as_tensors).backward().unwrap();
    let mut diff2 = 0.0;
    let mut analytic2 = 0.0;
    let mut numeric2 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = inputs[k].flatten_all().unwrap().to_vec1().unwrap();
        for idx in 0..base.len() {
            let eval = |delta: f64| {
                let mut moved = base.clone();
                moved[idx] += delta;
                let mut args = inputs.to_vec();
                args[k] = Tensor::from_vec(moved, inputs[k].shape(), &Device::Cpu).unwrap();
                f(&args).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            diff2 += (analytic[idx] - numeric).powi(2);
            analytic2 += analytic[idx].powi(2);
            numeric2 += numeric.powi(2);
        }
    }
    let scale = analytic2.sqrt().max(numeric2.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff2.sqrt() / scale
    }
}
