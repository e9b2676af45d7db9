//! Loss terms for multi-task trajectory pre-training.
//!
//! All distances are negative cosine similarities, so `d(a, b)` lies in `[-1, 1]`
//! and smaller means closer. The tensor versions accept unnormalized rows and
//! normalize internally, which keeps gradients exact for arbitrary inputs.
//! Every term is a plain sum; the accompanying counts allow mean reduction after
//! the fact.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this value are treated as zero.
const MIN_NORM: f64 = 1e-12;

/// Treatment outcome. `Pcr` is the positive class (label 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    NoPcr,
    Pcr,
}

impl Outcome {
    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            0 => Ok(Outcome::NoPcr),
            1 => Ok(Outcome::Pcr),
            other => Err(Error::DataQuality(format!("label must be 0 or 1, got {other}"))),
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Outcome::NoPcr => 0,
            Outcome::Pcr => 1,
        }
    }

    pub fn is_responder(self) -> bool {
        self == Outcome::Pcr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    View1,
    View2,
}

/// A unit-norm representation of one patient at one time point under one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub patient_id: String,
    pub time_index: usize,
    pub view: View,
    pub label: Outcome,
}

impl Embedding {
    /// Builds an embedding, projecting `values` onto the unit hypersphere.
    pub fn normalized(
        values: &[f32],
        patient_id: impl Into<String>,
        time_index: usize,
        view: View,
        label: Outcome,
    ) -> Result<Self> {
        Ok(Self {
            values: normalize_to_hypersphere(values)?,
            patient_id: patient_id.into(),
            time_index,
            view,
            label,
        })
    }
}

/// Identifies the row of a batch tensor: patient group, time point and outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub patient: usize,
    pub time_index: usize,
    pub label: Outcome,
}

/// Linear encoding of time points onto `[0, 1]`; the triplet margin is the
/// distance between encoded time points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSchedule {
    pub num_time_points: usize,
    pub step: f64,
}

impl MarginSchedule {
    pub fn new(num_time_points: usize, step: f64) -> Result<Self> {
        if num_time_points == 0 {
            return Err(Error::Config("margin schedule needs at least one time point".into()));
        }
        if !(step.is_finite() && step >= 0.0) {
            return Err(Error::Config(format!("margin step must be finite and >= 0, got {step}")));
        }
        let last = step * (num_time_points - 1) as f64;
        if last > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "encoded time points exceed [0, 1]: step {step} x {} = {last}",
                num_time_points - 1
            )));
        }
        Ok(Self { num_time_points, step })
    }

    /// Spreads the time points evenly so the last one maps to exactly 1.
    pub fn unit_interval(num_time_points: usize) -> Result<Self> {
        let step = if num_time_points > 1 {
            1.0 / (num_time_points - 1) as f64
        } else {
            0.0
        };
        Self::new(num_time_points, step)
    }

    pub fn encode(&self, t: usize) -> f64 {
        self.step * t as f64
    }
}

/// Margin for an anchor at `t` and a negative at `t_prime`.
pub fn dynamic_margin(schedule: &MarginSchedule, t: usize, t_prime: usize) -> Result<f64> {
    let n = schedule.num_time_points;
    if t >= n || t_prime >= n {
        return Err(Error::Domain(format!(
            "time index out of range: ({t}, {t_prime}) with {n} time points"
        )));
    }
    if t == t_prime {
        return Err(Error::InvalidTriplet(t));
    }
    Ok((schedule.encode(t) - schedule.encode(t_prime)).abs())
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Negative cosine similarity `-<a, b> / (|a| |b|)`.
pub fn neg_cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > MIN_NORM && nb > MIN_NORM) {
        return Err(Error::Domain("zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((-dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalize_to_hypersphere(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(Error::Domain("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Row-wise L2 normalization of a `[B, D]` tensor. Fails on any zero row.
pub fn l2_normalize_rows(z: &Tensor) -> Result<Tensor> {
    let norms = z.sqr()?.sum_keepdim(1)?.sqrt()?;
    let host = norms.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(row) = host.iter().position(|&n| !(n > MIN_NORM) || !n.is_finite()) {
        return Err(Error::Domain(format!("zero-norm or non-finite embedding at row {row}")));
    }
    Ok(z.broadcast_div(&norms)?)
}

/// Row-wise negative cosine similarity between two `[B, D]` tensors, shape `[B]`.
pub fn neg_cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let a = l2_normalize_rows(a)?;
    let b = l2_normalize_rows(b)?;
    Ok((a * b)?.sum(1)?.neg()?)
}

fn check_rows(z: &Tensor, keys: &[SampleKey], what: &str) -> Result<()> {
    let (rows, _) = z
        .dims2()
        .map_err(|_| Error::MalformedBatch(format!("{what} must be a [B, D] tensor, got {:?}", z.dims())))?;
    if rows != keys.len() {
        return Err(Error::MalformedBatch(format!(
            "{what} has {rows} rows but {} sample keys",
            keys.len()
        )));
    }
    Ok(())
}

fn scalar_zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

fn index_tensor(idx: Vec<u32>, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(idx.clone(), idx.len(), device)?)
}

/// Dynamic-margin temporal triplet loss.
///
/// Row `b` of `anchors` (first view) and row `b` of `positives` (second view)
/// share `keys[b]`. Negatives for an anchor are the first-view rows of the same
/// patient at every other time point. Returns the summed hinge and the number of
/// `(anchor, negative)` triplets.
pub fn temporal_triplet_loss(
    anchors: &Tensor,
    positives: &Tensor,
    keys: &[SampleKey],
    schedule: &MarginSchedule,
) -> Result<(Tensor, usize)> {
    check_rows(anchors, keys, "anchors")?;
    check_rows(positives, keys, "positives")?;
    if anchors.dims() != positives.dims() {
        return Err(Error::MalformedBatch(format!(
            "anchor/positive shape mismatch: {:?} vs {:?}",
            anchors.dims(),
            positives.dims()
        )));
    }
    let mut seen = HashMap::new();
    for (row, key) in keys.iter().enumerate() {
        if let Some(prev) = seen.insert((key.patient, key.time_index), row) {
            return Err(Error::MalformedBatch(format!(
                "rows {prev} and {row} both claim patient {} at time {}",
                key.patient, key.time_index
            )));
        }
    }

    let b = keys.len();
    let mut anchor_rows = Vec::new();
    let mut pair_cells = Vec::new();
    let mut margins = Vec::new();
    for (i, ki) in keys.iter().enumerate() {
        for (j, kj) in keys.iter().enumerate() {
            if ki.patient == kj.patient && ki.time_index != kj.time_index {
                anchor_rows.push(i as u32);
                pair_cells.push((i * b + j) as u32);
                margins.push(dynamic_margin(schedule, ki.time_index, kj.time_index)?);
            }
        }
    }
    if anchor_rows.is_empty() {
        return Ok((scalar_zero(anchors)?, 0));
    }
    let count = anchor_rows.len();
    let device = anchors.device();

    let a = l2_normalize_rows(anchors)?;
    let p = l2_normalize_rows(positives)?;
    let d_ap = (&a * &p)?.sum(1)?.neg()?;
    let sim = a.matmul(&a.t()?)?.flatten_all()?;

    let d_ap = d_ap.index_select(&index_tensor(anchor_rows, device)?, 0)?;
    let d_an = sim.index_select(&index_tensor(pair_cells, device)?, 0)?.neg()?;
    let margins = Tensor::from_vec(margins, count, device)?.to_dtype(anchors.dtype())?;
    let hinge = ((d_ap - d_an)? + margins)?.relu()?;
    Ok((hinge.sum_all()?, count))
}

/// Which patient pairs the alignment term pulls together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPairing {
    /// Only pairs where both patients reached pCR.
    RespondersOnly,
    /// Every pair regardless of outcome (the all-labels ablation).
    AllLabels,
}

/// Responder alignment: summed negative cosine over ordered pairs of distinct
/// patients observed at the same time point. Returns the sum and the pair count.
pub fn alignment_loss(z: &Tensor, keys: &[SampleKey], pairing: AlignPairing) -> Result<(Tensor, usize)> {
    check_rows(z, keys, "embeddings")?;
    let b = keys.len();
    let mut cells = Vec::new();
    for (i, ki) in keys.iter().enumerate() {
        for (j, kj) in keys.iter().enumerate() {
            let gated = match pairing {
                AlignPairing::RespondersOnly => ki.label.is_responder() && kj.label.is_responder(),
                AlignPairing::AllLabels => true,
            };
            if gated && ki.patient != kj.patient && ki.time_index == kj.time_index {
                cells.push((i * b + j) as u32);
            }
        }
    }
    if cells.is_empty() {
        return Ok((scalar_zero(z)?, 0));
    }
    let count = cells.len();
    // Only rows that take part in a pair are normalized, so unused rows
    // (including zero-norm ones) cannot influence the result.
    let mut used: Vec<u32> = cells.iter().flat_map(|&c| [c / b as u32, c % b as u32]).collect();
    used.sort_unstable();
    used.dedup();
    let pos: HashMap<u32, u32> = used.iter().enumerate().map(|(k, &r)| (r, k as u32)).collect();
    let m = used.len();
    let sub = z.index_select(&index_tensor(used.clone(), z.device())?, 0)?;
    let sub = l2_normalize_rows(&sub)?;
    let sim = sub.matmul(&sub.t()?)?.flatten_all()?;
    let local: Vec<u32> = cells
        .iter()
        .map(|&c| pos[&(c / b as u32)] * m as u32 + pos[&(c % b as u32)])
        .collect();
    let picked = sim.index_select(&index_tensor(local, z.device())?, 0)?;
    Ok((picked.sum_all()?.neg()?, count))
}

/// Per-image mean squared error, summed over the batch. Returns the sum and the
/// number of images.
pub fn reconstruction_loss(targets: &Tensor, reconstructions: &Tensor) -> Result<(Tensor, usize)> {
    if targets.dims() != reconstructions.dims() {
        return Err(Error::MalformedBatch(format!(
            "reconstruction shape {:?} does not match target {:?}",
            reconstructions.dims(),
            targets.dims()
        )));
    }
    if targets.rank() < 2 {
        return Err(Error::MalformedBatch("expected a batch of images".into()));
    }
    let n = targets.dims()[0];
    if n == 0 {
        return Ok((scalar_zero(targets)?, 0));
    }
    let per_image = (reconstructions - targets)?.sqr()?.flatten_from(1)?.mean(1)?;
    Ok((per_image.sum_all()?, n))
}

/// Which terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub temporal: bool,
    pub align: bool,
    pub align_all_labels: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            temporal: true,
            align: true,
            align_all_labels: false,
        }
    }
}

impl LossSwitches {
    pub fn pairing(&self) -> AlignPairing {
        if self.align_all_labels {
            AlignPairing::AllLabels
        } else {
            AlignPairing::RespondersOnly
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub temp: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            temp: 1.0,
            align: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCounts {
    pub triplets: usize,
    pub pairs: usize,
    pub reconstructions: usize,
}

impl LossCounts {
    pub fn is_empty(&self) -> bool {
        self.triplets == 0 && self.pairs == 0 && self.reconstructions == 0
    }
}

/// Scalar values of one batch's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rec: f64,
    pub temp: f64,
    pub align: f64,
    pub total: f64,
    pub counts: LossCounts,
}

/// Scalar form of the combined objective with unit weights.
pub fn combined_loss(rec: f64, temp: f64, align: f64, switches: &LossSwitches) -> LossBundle {
    combined_loss_weighted(rec, temp, align, switches, &LossWeights::default())
}

pub fn combined_loss_weighted(
    rec: f64,
    temp: f64,
    align: f64,
    switches: &LossSwitches,
    weights: &LossWeights,
) -> LossBundle {
    let mut total = weights.rec * rec;
    if switches.temporal {
        total += weights.temp * temp;
    }
    if switches.align {
        total += weights.align * align;
    }
    LossBundle {
        rec,
        temp,
        align,
        total,
        counts: LossCounts::default(),
    }
}

/// Differentiable form of [`combined_loss_weighted`].
pub fn combine_terms(
    rec: &Tensor,
    temp: &Tensor,
    align: &Tensor,
    switches: &LossSwitches,
    weights: &LossWeights,
) -> Result<Tensor> {
    let mut total = rec.affine(weights.rec, 0.0)?;
    if switches.temporal {
        total = (total + temp.affine(weights.temp, 0.0)?)?;
    }
    if switches.align {
        total = (total + align.affine(weights.align, 0.0)?)?;
    }
    Ok(total)
}

/// Stacks first- and second-view embeddings into row-aligned tensors with keys.
/// Each `view1[k]` must match `view2[k]` in patient and time point.
pub fn stack_views(view1: &[Embedding], view2: &[Embedding], device: &Device) -> Result<(Tensor, Tensor, Vec<SampleKey>)> {
    if view1.len() != view2.len() {
        return Err(Error::MalformedBatch(format!(
            "{} first-view embeddings but {} second-view embeddings",
            view1.len(),
            view2.len()
        )));
    }
    let dim = view1.first().map_or(0, |e| e.values.len());
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut keys = Vec::with_capacity(view1.len());
    let mut a = Vec::with_capacity(view1.len() * dim);
    let mut p = Vec::with_capacity(view1.len() * dim);
    for (e1, e2) in view1.iter().zip(view2) {
        if e1.patient_id != e2.patient_id || e1.time_index != e2.time_index {
            return Err(Error::MalformedBatch(format!(
                "missing positive view for patient {} at time {}",
                e1.patient_id, e1.time_index
            )));
        }
        if e1.values.len() != dim || e2.values.len() != dim {
            return Err(Error::MalformedBatch("embedding lengths differ".into()));
        }
        let next = ids.len();
        let patient = *ids.entry(e1.patient_id.as_str()).or_insert(next);
        keys.push(SampleKey {
            patient,
            time_index: e1.time_index,
            label: e1.label,
        });
        a.extend_from_slice(&e1.values);
        p.extend_from_slice(&e2.values);
    }
    let n = keys.len();
    Ok((
        Tensor::from_vec(a, (n, dim), device)?,
        Tensor::from_vec(p, (n, dim), device)?,
        keys,
    ))
}
