//! Frozen-feature linear probing and the metric suite.
//!
//! Patients are the unit of evaluation: each probe row holds one patient's
//! embeddings for the requested time points, fused by concatenation in time
//! order (or optionally by averaging).

use std::collections::BTreeSet;
use std::fmt;

use candle_core::Tensor;
use log::warn;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::PatientSeries;
use crate::error::{Error, Result};
use crate::model::TrajectoryNet;

/// Time points fed to the probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    T0,
    T0T1,
    T0T3,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::T0, Subset::T0T1, Subset::T0T3];

    pub fn time_indices(self) -> &'static [usize] {
        match self {
            Subset::T0 => &[0],
            Subset::T0T1 => &[0, 1],
            Subset::T0T3 => &[0, 1, 2, 3],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::T0 => "T0",
            Subset::T0T1 => "T0+T1",
            Subset::T0T3 => "T0->T3",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t0" => Ok(Subset::T0),
            "t0t1" | "t0+t1" | "t0_t1" => Ok(Subset::T0T1),
            "t0t3" | "t0->t3" | "t0_t3" | "all" => Ok(Subset::T0T3),
            other => Err(Error::Config(format!("unknown subset {other:?}; use t0, t0t1 or t0t3"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Time-ordered concatenation; feature length is `embed_dim * |subset|`.
    #[default]
    Concat,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub patient_ids: Vec<String>,
    pub subset: Subset,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Embeds clean images in batches of `batch`; one row per image.
pub fn embed_images(model: &TrajectoryNet, images: &[&Array3<f32>], batch: usize) -> Result<Array2<f32>> {
    let dim = model.config().embed_dim;
    let mut out = Array2::<f32>::zeros((images.len(), dim));
    for (chunk_idx, chunk) in images.chunks(batch.max(1)).enumerate() {
        let (c, h, w) = chunk[0].dim();
        let mut flat = Vec::with_capacity(chunk.len() * c * h * w);
        for img in chunk {
            if img.dim() != (c, h, w) {
                return Err(Error::Shape(format!("mixed image shapes {:?} and {:?}", (c, h, w), img.dim())));
            }
            flat.extend(img.iter().copied());
        }
        let x = Tensor::from_vec(flat, (chunk.len(), c, h, w), model.device())?;
        let z = model.embed(&x)?.to_vec2::<f32>()?;
        for (k, row) in z.into_iter().enumerate() {
            out.row_mut(chunk_idx * batch + k).assign(&Array1::from(row));
        }
    }
    Ok(out)
}

/// Per-patient embeddings `[T, D]` for every time point present.
pub fn embed_cohort(model: &TrajectoryNet, cohort: &[PatientSeries]) -> Result<Vec<Array2<f32>>> {
    let images: Vec<&Array3<f32>> = cohort.iter().flat_map(|p| p.images.iter()).collect();
    let all = embed_images(model, &images, 32)?;
    let mut out = Vec::with_capacity(cohort.len());
    let mut row = 0;
    for p in cohort {
        let n = p.images.len();
        out.push(all.slice(ndarray::s![row..row + n, ..]).to_owned());
        row += n;
    }
    Ok(out)
}

/// Fuses precomputed per-patient embeddings into a probe dataset. Patients
/// lacking a time point of the subset are skipped with a warning.
pub fn fuse_features(
    cohort: &[PatientSeries],
    embeddings: &[Array2<f32>],
    subset: Subset,
    fusion: Fusion,
) -> Result<ProbeDataset> {
    let times = subset.time_indices();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (p, emb) in cohort.iter().zip(embeddings) {
        if times.iter().any(|&t| t >= emb.nrows()) {
            warn!("patient {} lacks time points for {}; excluded", p.patient_id, subset.as_str());
            continue;
        }
        let row: Vec<f64> = match fusion {
            Fusion::Concat => times.iter().flat_map(|&t| emb.row(t).iter().map(|&v| v as f64).collect::<Vec<_>>()).collect(),
            Fusion::Mean => {
                let mut acc = vec![0.0; emb.ncols()];
                for &t in times {
                    for (a, &v) in acc.iter_mut().zip(emb.row(t)) {
                        *a += v as f64 / times.len() as f64;
                    }
                }
                acc
            }
        };
        rows.push(row);
        labels.push(p.label.label());
        ids.push(p.patient_id.clone());
    }
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((labels.len(), dim), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(ProbeDataset {
        features,
        labels,
        patient_ids: ids,
        subset,
    })
}

/// Runs the frozen encoder and projector on un-augmented images.
pub fn extract_features(model: &TrajectoryNet, cohort: &[PatientSeries], subset: Subset, fusion: Fusion) -> Result<ProbeDataset> {
    let embeddings = embed_cohort(model, cohort)?;
    fuse_features(cohort, &embeddings, subset, fusion)
}

/// Fails if any patient appears in both datasets.
pub fn check_no_leakage(train: &ProbeDataset, test: &ProbeDataset) -> Result<()> {
    let a: BTreeSet<_> = train.patient_ids.iter().collect();
    if let Some(id) = test.patient_ids.iter().find(|id| a.contains(id)) {
        return Err(Error::DataQuality(format!("patient {id} is in both probe-train and probe-test")));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Domain("labels must be 0 or 1".into()));
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("need both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Domain(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    Ok(())
}

/// Samples sorted by descending score, grouped into runs of equal score; each
/// group is `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for i in order {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed");
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Area under the ROC curve as the probability that a random positive outscores
/// a random negative, ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    // twice the concordance count, kept integral so the result is exact
    let mut twice = 0u64;
    let mut neg_below = neg as u64;
    for (p, n) in tie_groups(scores, labels) {
        neg_below -= n as u64;
        twice += 2 * p as u64 * neg_below + p as u64 * n as u64;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Average precision: precision at each distinct threshold weighted by the
/// recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (pos, _) = class_counts(labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_scores(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// PR points `(recall, precision)` at each distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_scores(scores, labels)?;
    let (pos, _) = class_counts(labels)?;
    let mut pts = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        pts.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(pts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Zero when nothing is predicted positive.
    pub ppv: f64,
    /// Zero when nothing is predicted negative.
    pub npv: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    /// Predicted positive when `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check_scores(scores, labels)?;
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn metrics(&self) -> ConfusionMetrics {
        let sensitivity = ratio(self.tp, self.tp + self.fn_);
        let specificity = ratio(self.tn, self.tn + self.fp);
        ConfusionMetrics {
            balanced_accuracy: (sensitivity + specificity) / 2.0,
            sensitivity,
            specificity,
            ppv: ratio(self.tp, self.tp + self.fp),
            npv: ratio(self.tn, self.tn + self.fn_),
        }
    }
}

pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMetrics> {
    class_counts(labels)?;
    Ok(Confusion::at(scores, labels, threshold)?.metrics())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ThresholdPolicy {
    Fixed { value: f64 },
    /// Maximizes balanced accuracy on the validation split, per run.
    Validation,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fixed { value: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Inverse L2 strength: the objective is `sum(logloss) + |w|^2 / (2 c)`.
    pub c: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub threshold: ThresholdPolicy,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 16,
            threshold: ThresholdPolicy::default(),
        }
    }
}

/// L2-regularized logistic regression on standardized features, fitted by
/// mini-batch SGD. Data order comes from `seed`, so fits differ across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LogisticProbe {
    pub fn fit(features: &Array2<f64>, labels: &[u8], config: &ProbeConfig, seed: u64) -> Result<Self> {
        let (n, d) = features.dim();
        if n != labels.len() {
            return Err(Error::Probe(format!("{n} feature rows for {} labels", labels.len())));
        }
        class_counts(labels).map_err(|_| Error::Probe("training labels contain a single class".into()))?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Probe("non-finite features".into()));
        }
        if !(config.c > 0.0 && config.learning_rate > 0.0 && config.batch_size > 0) {
            return Err(Error::Config("probe c, learning_rate and batch_size must be positive".into()));
        }
        let mean = features.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let scale: Vec<f64> = features
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        let x = Array2::from_shape_fn((n, d), |(i, j)| (features[[i, j]] - mean[j]) / scale[j]);
        let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();

        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reg = 1.0 / (config.c * n as f64);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let lr = config.learning_rate / (1.0 + 0.01 * epoch as f64);
            for batch in order.chunks(config.batch_size) {
                let mut gw = vec![0.0; d];
                let mut gb = 0.0;
                for &i in batch {
                    let row = x.row(i);
                    let z: f64 = b + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                    let r = sigmoid(z) - y[i];
                    gb += r;
                    for (g, &v) in gw.iter_mut().zip(row) {
                        *g += r * v;
                    }
                }
                let m = batch.len() as f64;
                for (wj, gj) in w.iter_mut().zip(&gw) {
                    *wj -= lr * (gj / m + reg * *wj);
                }
                b -= lr * gb / m;
            }
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
        })
    }

    pub fn predict_proba(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.weights.len() {
            return Err(Error::Probe(format!(
                "probe expects {} features, got {}",
                self.weights.len(),
                features.ncols()
            )));
        }
        Ok(features
            .rows()
            .into_iter()
            .map(|row| {
                let z: f64 = self.bias
                    + row
                        .iter()
                        .zip(&self.weights)
                        .zip(self.mean.iter().zip(&self.scale))
                        .map(|((&v, &w), (&m, &s))| w * (v - m) / s)
                        .sum::<f64>();
                sigmoid(z)
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub threshold: f64,
    pub auroc: f64,
    pub prauc: f64,
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
    pub npv: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

pub const METRIC_NAMES: [&str; 7] = ["auroc", "prauc", "balanced_accuracy", "sensitivity", "specificity", "ppv", "npv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: Subset,
    pub n_runs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub auroc: MeanStd,
    pub prauc: MeanStd,
    pub balanced_accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub ppv: MeanStd,
    pub npv: MeanStd,
    pub runs: Vec<RunMetrics>,
    /// ROC of the first run's test scores.
    pub roc: Vec<(f64, f64)>,
    pub pr: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        Some(match name {
            "auroc" => self.auroc,
            "prauc" => self.prauc,
            "balanced_accuracy" => self.balanced_accuracy,
            "sensitivity" => self.sensitivity,
            "specificity" => self.specificity,
            "ppv" => self.ppv,
            "npv" => self.npv,
            _ => return None,
        })
    }

    pub fn samples(&self, name: &str) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| match name {
                "auroc" => r.auroc,
                "prauc" => r.prauc,
                "balanced_accuracy" => r.balanced_accuracy,
                "sensitivity" => r.sensitivity,
                "specificity" => r.specificity,
                "ppv" => r.ppv,
                _ => r.npv,
            })
            .collect()
    }

    /// Human-readable table of mean ± std per metric.
    pub fn table(&self) -> String {
        let mut s = format!(
            "subset {}  runs {}  train {}  test {}  dim {}\n",
            self.subset.as_str(),
            self.n_runs,
            self.n_train,
            self.n_test,
            self.feature_dim
        );
        for name in METRIC_NAMES {
            s.push_str(&format!("{name:<18} {}\n", self.metric(name).expect("known metric")));
        }
        s
    }
}

fn best_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(0.5);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for t in candidates {
        let ba = confusion_metrics(scores, labels, t)?.balanced_accuracy;
        if ba > best.0 {
            best = (ba, t);
        }
    }
    Ok(best.1)
}

/// Fits `n_runs` probes on `train` (seeds `seed..seed + n_runs`) and scores each
/// on `test`. `val` is only consulted for [`ThresholdPolicy::Validation`].
pub fn linear_probe(
    train: &ProbeDataset,
    test: &ProbeDataset,
    val: Option<&ProbeDataset>,
    n_runs: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<EvalReport> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be positive".into()));
    }
    if train.subset != test.subset || train.feature_dim() != test.feature_dim() {
        return Err(Error::Probe("train and test features come from different subsets".into()));
    }
    check_no_leakage(train, test)?;
    class_counts(&test.labels)?;
    let mut runs = Vec::with_capacity(n_runs);
    let mut curves = None;
    for r in 0..n_runs as u64 {
        let run_seed = seed.wrapping_add(r);
        let probe = LogisticProbe::fit(&train.features, &train.labels, config, run_seed)?;
        let scores = probe.predict_proba(&test.features)?;
        let threshold = match (config.threshold, val) {
            (ThresholdPolicy::Fixed { value }, _) => value,
            (ThresholdPolicy::Validation, Some(v)) => best_threshold(&probe.predict_proba(&v.features)?, &v.labels)?,
            (ThresholdPolicy::Validation, None) => {
                return Err(Error::Config("validation threshold policy needs validation features".into()))
            }
        };
        let cm = confusion_metrics(&scores, &test.labels, threshold)?;
        if curves.is_none() {
            curves = Some((roc_curve(&scores, &test.labels)?, pr_curve(&scores, &test.labels)?));
        }
        runs.push(RunMetrics {
            seed: run_seed,
            threshold,
            auroc: roc_auc(&scores, &test.labels)?,
            prauc: pr_auc(&scores, &test.labels)?,
            balanced_accuracy: cm.balanced_accuracy,
            sensitivity: cm.sensitivity,
            specificity: cm.specificity,
            ppv: cm.ppv,
            npv: cm.npv,
        });
    }
    let (roc, pr) = curves.expect("at least one run");
    let col = |f: fn(&RunMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        subset: test.subset,
        n_runs,
        n_train: train.len(),
        n_test: test.len(),
        feature_dim: test.feature_dim(),
        auroc: col(|r| r.auroc),
        prauc: col(|r| r.prauc),
        balanced_accuracy: col(|r| r.balanced_accuracy),
        sensitivity: col(|r| r.sensitivity),
        specificity: col(|r| r.specificity),
        ppv: col(|r| r.ppv),
        npv: col(|r| r.npv),
        runs,
        roc,
        pr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub t_statistic: f64,
    /// Two-sided, multiplied by the number of comparisons and capped at 1.
    pub p_value: f64,
    pub mean_difference: f64,
    /// Set when the differences have zero variance; `p_value` is then 1.
    pub tie: bool,
}

/// Two-sided paired t-test with Bonferroni correction.
pub fn paired_significance(a: &[f64], b: &[f64], n_comparisons: usize) -> Result<Significance> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Domain("paired test needs at least two pairs".into()));
    }
    if n_comparisons == 0 {
        return Err(Error::Domain("n_comparisons must be at least 1".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("paired samples must be finite".into()));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // relative to the magnitude of the differences, to absorb rounding in `x - y`
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if var.sqrt() <= 1e-12 * scale {
        return Ok(Significance {
            t_statistic: 0.0,
            p_value: 1.0,
            mean_difference: mean,
            tie: true,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(Significance {
        t_statistic: t,
        p_value: (p * n_comparisons as f64).min(1.0),
        mean_difference: mean,
        tie: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_example() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn perfect_scores() {
        let labels = [0, 1, 0, 1, 1];
        let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(pr_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn all_positive_predictions() {
        let m = confusion_metrics(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((m.sensitivity, m.specificity, m.balanced_accuracy), (1.0, 0.0, 0.5));
        assert_eq!(m.npv, 0.0);
    }

    #[test]
    fn ten_sample_confusion_matrix() {
        // tp = 3 (0.9, 0.8, 0.55), fn = 1 (0.3), tn = 4, fp = 2 (0.7, 0.5)
        let scores = [0.9, 0.8, 0.55, 0.3, 0.7, 0.5, 0.2, 0.1, 0.4, 0.45];
        let labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let c = Confusion::at(&scores, &labels, 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 3, fp: 2, tn: 4, fn_: 1 });
        let m = c.metrics();
        assert_eq!(m.sensitivity, 0.75);
        assert_eq!(m.specificity, 4.0 / 6.0);
        assert_eq!(m.ppv, 0.6);
        assert_eq!(m.npv, 0.8);
        assert_eq!(m.balanced_accuracy, (0.75 + 4.0 / 6.0) / 2.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(pr_auc(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
        let x = Array2::zeros((3, 2));
        assert!(matches!(
            LogisticProbe::fit(&x, &[0, 0, 0], &ProbeConfig::default(), 0),
            Err(Error::Probe(_))
        ));
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&[0.3, 0.1, 0.7, 0.7], &[1, 0, 0, 1]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn t_test_textbook_case() {
        // d = [1, 2, 3, 4, 6]: mean 3.2, sd sqrt(3.7), t = 3.2 / sqrt(3.7 / 5)
        let a = [11.0, 12.0, 13.0, 14.0, 16.0];
        let b = [10.0; 5];
        let s = paired_significance(&a, &b, 1).unwrap();
        let t = 3.2 / (3.7f64 / 5.0).sqrt();
        assert!((s.t_statistic - t).abs() < 1e-12);
        // two-sided p for t = 3.7199, df = 4 (scipy.stats.ttest_rel)
        assert!((s.p_value - 0.020_475_874_420_910_676).abs() < 1e-6, "{}", s.p_value);
        let s3 = paired_significance(&a, &b, 3).unwrap();
        assert!((s3.p_value - 3.0 * s.p_value).abs() < 1e-12);
    }

    #[test]
    fn constant_difference_is_a_tie() {
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.07).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 0.1).collect();
        let s = paired_significance(&a, &b, 2).unwrap();
        assert!(s.tie);
        assert_eq!(s.p_value, 1.0);
        let same = paired_significance(&b, &b, 1).unwrap();
        assert!(same.tie && same.p_value == 1.0);
    }

    fn toy(n: usize, separable: bool, seed: u64) -> ProbeDataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let features = Array2::from_shape_fn((n, 5), |(i, j)| {
            let noise: f64 = rng.random::<f64>() - 0.5;
            if separable && j == 0 {
                labels[i] as f64 * 2.0 + noise * 0.5
            } else {
                noise
            }
        });
        ProbeDataset {
            features,
            labels,
            patient_ids: (0..n).map(|i| format!("s{seed}-{i}")).collect(),
            subset: Subset::T0,
        }
    }

    #[test]
    fn separable_probe_is_perfect() {
        let report = linear_probe(&toy(60, true, 1), &toy(30, true, 2), None, 3, &ProbeConfig::default(), 0).unwrap();
        assert_eq!(report.auroc.mean, 1.0);
        assert_eq!(report.balanced_accuracy.mean, 1.0);
        assert!(report.table().contains("auroc"));
    }

    #[test]
    fn leakage_is_detected() {
        let a = toy(30, true, 1);
        assert!(matches!(linear_probe(&a, &a, None, 1, &ProbeConfig::default(), 0), Err(Error::DataQuality(_))));
    }
}
