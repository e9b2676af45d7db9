//! Patient-grouped batches. Every batch holds whole patient series so each
//! anchor has same-patient negatives, and responders are spread so that
//! batches carry responder pairs for the alignment term.

use candle_core::{Device, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::augmentation::{make_views, AugmentationPolicy};
use crate::data::PatientSeries;
use crate::error::{Error, Result};
use crate::losses::{Outcome, SampleKey};

/// Splits the patients into batches of `patients_per_batch`, without
/// replacement; patients left over after the last full batch sit out the epoch.
///
/// Responders are dealt so that each batch gets at least `min_responders` of
/// them when there are enough, otherwise as many batches as possible get that
/// many. Returns indices into `labels`.
pub fn plan_epoch<R: Rng>(
    labels: &[Outcome],
    patients_per_batch: usize,
    min_responders: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if patients_per_batch == 0 || n < patients_per_batch {
        return Err(Error::Config(format!(
            "training split has {n} patients; a batch needs {patients_per_batch}"
        )));
    }
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i].is_responder()).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !labels[i].is_responder()).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_batches = n / patients_per_batch;
    let slots = n_batches * patients_per_batch;

    // responders used this epoch: proportional share, within what fits
    let share = (pos.len() as f64 * slots as f64 / n as f64).round() as usize;
    let pos_used = share.max(slots.saturating_sub(neg.len())).min(pos.len()).min(slots);
    let mut quota = vec![0usize; n_batches];
    let k = min_responders.max(1);
    if pos_used >= k * n_batches {
        for (b, q) in quota.iter_mut().enumerate() {
            *q = pos_used / n_batches + usize::from(b < pos_used % n_batches);
        }
    } else {
        let mut left = pos_used;
        for q in quota.iter_mut() {
            let take = left.min(k);
            if take < k {
                break;
            }
            *q = take;
            left -= take;
        }
        // a lone leftover responder joins a batch that already has pairs
        quota[0] += left;
    }
    if quota.iter().any(|&q| q > patients_per_batch) {
        return Err(Error::Config("responder quota exceeds batch size".into()));
    }
    let mut pos_iter = pos.into_iter();
    let mut neg_iter = neg.into_iter();
    let mut batches = Vec::with_capacity(n_batches);
    for q in quota {
        let mut batch: Vec<usize> = pos_iter.by_ref().take(q).collect();
        batch.extend(neg_iter.by_ref().take(patients_per_batch - q));
        if batch.len() != patients_per_batch {
            return Err(Error::Config("not enough patients to fill a batch".into()));
        }
        batch.shuffle(rng);
        batches.push(batch);
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// A training batch: clean images, two augmented views and row keys, all in
/// patient-major, time-minor order.
#[derive(Debug)]
pub struct Batch {
    pub patient_ids: Vec<String>,
    pub labels: Vec<Outcome>,
    pub clean: Tensor,
    pub view1: Tensor,
    pub view2: Tensor,
    pub keys: Vec<SampleKey>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// One line describing the composition, for diagnostics.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .patient_ids
            .iter()
            .zip(&self.labels)
            .map(|(id, l)| format!("{id}(y={})", l.label()))
            .collect();
        format!("{} images from {}", self.len(), parts.join(", "))
    }
}

fn stack(images: &[Array3<f32>], device: &Device) -> Result<Tensor> {
    let (c, h, w) = images[0].dim();
    let mut flat = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        flat.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (images.len(), c, h, w), device)?)
}

/// Builds the batch for `members` (indices into `cohort`), drawing both views of
/// every image from `rng` in row order.
pub fn sample_batch<R: Rng>(
    cohort: &[PatientSeries],
    members: &[usize],
    policy: &AugmentationPolicy,
    rng: &mut R,
    device: &Device,
) -> Result<Batch> {
    if members.is_empty() {
        return Err(Error::MalformedBatch("empty batch".into()));
    }
    let mut clean = Vec::new();
    let mut v1 = Vec::new();
    let mut v2 = Vec::new();
    let mut keys = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (slot, &i) in members.iter().enumerate() {
        let p = cohort
            .get(i)
            .ok_or_else(|| Error::MalformedBatch(format!("patient index {i} out of range")))?;
        for (t, img) in p.images.iter().enumerate() {
            let (a, b) = make_views(img.view(), policy, rng)?;
            clean.push(img.clone());
            v1.push(a);
            v2.push(b);
            keys.push(SampleKey {
                patient: slot,
                time_index: t,
                label: p.label,
            });
        }
        ids.push(p.patient_id.clone());
        labels.push(p.label);
    }
    Ok(Batch {
        patient_ids: ids,
        labels,
        clean: stack(&clean, device)?,
        view1: stack(&v1, device)?,
        view2: stack(&v2, device)?,
        keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize, pos: usize) -> Vec<Outcome> {
        (0..n).map(|i| if i < pos { Outcome::Pcr } else { Outcome::NoPcr }).collect()
    }

    #[test]
    fn batches_are_disjoint_and_full() {
        let l = labels(140, 46);
        let plan = plan_epoch(&l, 8, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(plan.len(), 17);
        let mut seen = std::collections::HashSet::new();
        for b in &plan {
            assert_eq!(b.len(), 8);
            assert!(b.iter().filter(|&&i| l[i].is_responder()).count() >= 2);
            for &i in b {
                assert!(seen.insert(i));
            }
        }
    }

    #[test]
    fn scarce_responders_are_paired() {
        let l = labels(40, 5);
        let plan = plan_epoch(&l, 8, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let counts: Vec<usize> = plan.iter().map(|b| b.iter().filter(|&&i| l[i].is_responder()).count()).collect();
        assert!(counts.iter().all(|&c| c != 1), "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 5);
    }

    #[test]
    fn no_responders_is_fine() {
        let l = labels(16, 0);
        let plan = plan_epoch(&l, 8, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(plan.len(), 2);
    }

    #[test]
    fn too_small_split() {
        assert!(matches!(
            plan_epoch(&labels(7, 3), 8, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_layout() {
        let cohort = crate::data::synthesize_cohort(8, 0.5, 0).unwrap();
        let a = crate::data::build_manifest(
            &[
                cohort.labels_table(),
                (0..20).map(|i| (format!("pad{i}"), if i < 10 { Outcome::Pcr } else { Outcome::NoPcr })).collect(),
            ]
            .concat(),
            &Default::default(),
            0,
        )
        .unwrap();
        let series = cohort.into_series(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&series, &[0, 3], &AugmentationPolicy::default(), &mut rng, &Device::Cpu).unwrap();
        assert_eq!(b.view1.dims(), &[8, 3, 64, 64]);
        assert_eq!(b.keys.iter().filter(|k| k.patient == 1).count(), 4);
        assert_eq!(b.keys[5].time_index, 1);
    }
}
