//! Synthetic longitudinal lesion cohort for desk-scale runs.
//!
//! Each patient gets a smooth background texture and an elliptical lesion
//! whose area follows a per-patient course over the four time points.
//! Responders shrink at a rate drawn from a shared distribution; non-responders
//! are an even mixture of stable, growing and partially shrinking lesions.
//! Responders also tend to a higher kinetic (third-channel) enhancement from
//! baseline on, drawn from a range that overlaps the non-responders'.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PatientSeries, Split, SplitAssignment, NUM_TIME_POINTS};
use crate::error::{Error, Result};
use crate::losses::Outcome;

pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// Responder shrink rate per time point.
pub const RESPONDER_RATE: (f64, f64) = (0.30, 0.45);
/// Partial-responder shrink rate per time point.
pub const PARTIAL_RATE: (f64, f64) = (0.08, 0.20);
/// Growth rate per time point.
pub const GROWTH_RATE: (f64, f64) = (0.05, 0.15);
/// Area drift per time point for stable lesions.
pub const STABLE_DRIFT: f64 = 0.04;
/// Kinetic-channel enhancement of responders and non-responders.
pub const RESPONDER_KINETICS: (f64, f64) = (0.6, 0.95);
pub const NONRESPONDER_KINETICS: (f64, f64) = (0.4, 0.8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionCourse {
    Responding,
    Stable,
    Growing,
    Partial,
}

/// A static bright structure (vessel-like) that does not change over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
}

/// Per-time-point acquisition differences unrelated to response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub gain: f64,
    pub shift: (f64, f64),
}

/// Ground-truth generative parameters of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionParams {
    pub course: LesionCourse,
    /// Signed per-time-point area change: area(t) = area(0) * (1 + rate)^t.
    pub rate: f64,
    /// Lesion centre in pixels, `(row, col)`.
    pub center: (f64, f64),
    /// Semi-axes at T0 in pixels.
    pub semi_axes: (f64, f64),
    pub angle: f64,
    /// Peak lesion enhancement per channel.
    pub intensity: [f64; 3],
    /// Background texture: `(amplitude, freq_y, freq_x, phase)` components.
    pub texture: Vec<(f64, f64, f64, f64)>,
    pub background: f64,
    pub distractors: Vec<Blob>,
    pub acquisitions: Vec<Acquisition>,
}

impl LesionParams {
    pub fn area_factor(&self, t: usize) -> f64 {
        (1.0 + self.rate).powi(t as i32)
    }

    /// Nominal lesion area in pixels at time point `t`.
    pub fn area(&self, t: usize) -> f64 {
        PI * self.semi_axes.0 * self.semi_axes.1 * self.area_factor(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub patient_ids: Vec<String>,
    pub labels: Vec<Outcome>,
    pub params: Vec<LesionParams>,
    /// `images[p][t]` is a `[3, H, W]` image in `[0, 1]`.
    pub images: Vec<Vec<Array3<f32>>>,
}

impl SyntheticCohort {
    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    pub fn labels_table(&self) -> Vec<(String, Outcome)> {
        self.patient_ids.iter().cloned().zip(self.labels.iter().copied()).collect()
    }

    pub fn into_series(self, assignment: &SplitAssignment) -> Result<Vec<PatientSeries>> {
        self.patient_ids
            .into_iter()
            .zip(self.labels)
            .zip(self.images)
            .map(|((patient_id, label), images)| {
                let split = assignment
                    .get(&patient_id)
                    .ok_or_else(|| Error::DataQuality(format!("patient {patient_id} has no split")))?;
                Ok(PatientSeries {
                    patient_id,
                    label,
                    split,
                    images,
                })
            })
            .collect()
    }

    pub fn count(&self, split: Split, assignment: &SplitAssignment) -> usize {
        self.patient_ids.iter().filter(|id| assignment.get(id) == Some(split)).count()
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn draw_params<R: Rng>(rng: &mut R, label: Outcome, size: usize) -> LesionParams {
    let course = match label {
        Outcome::Pcr => LesionCourse::Responding,
        Outcome::NoPcr => [LesionCourse::Stable, LesionCourse::Growing, LesionCourse::Partial][rng.random_range(0..3)],
    };
    let rate = match course {
        LesionCourse::Responding => -uniform(rng, RESPONDER_RATE),
        LesionCourse::Partial => -uniform(rng, PARTIAL_RATE),
        LesionCourse::Growing => uniform(rng, GROWTH_RATE),
        LesionCourse::Stable => uniform(rng, (-STABLE_DRIFT, STABLE_DRIFT)),
    };
    let s = size as f64;
    let center = (s / 2.0 + uniform(rng, (-0.12, 0.12)) * s, s / 2.0 + uniform(rng, (-0.12, 0.12)) * s);
    let major = uniform(rng, (0.1, 0.24)) * s;
    let semi_axes = (major, major * uniform(rng, (0.55, 1.0)));
    let angle = uniform(rng, (0.0, PI));
    let early = uniform(rng, (0.5, 0.95));
    let late = early * uniform(rng, (0.6, 0.9));
    let ser = match label {
        Outcome::Pcr => uniform(rng, RESPONDER_KINETICS),
        Outcome::NoPcr => uniform(rng, NONRESPONDER_KINETICS),
    };
    let texture = (0..6)
        .map(|_| {
            (
                uniform(rng, (0.02, 0.07)),
                uniform(rng, (-6.0, 6.0)),
                uniform(rng, (-6.0, 6.0)),
                uniform(rng, (0.0, 2.0 * PI)),
            )
        })
        .collect();
    let n_blobs = rng.random_range(2..=5);
    let distractors = (0..n_blobs)
        .map(|_| Blob {
            center: (uniform(rng, (0.05, 0.95)) * s, uniform(rng, (0.05, 0.95)) * s),
            radius: uniform(rng, (0.02, 0.07)) * s,
            intensity: uniform(rng, (0.4, 0.9)),
        })
        .collect();
    let acquisitions = (0..NUM_TIME_POINTS)
        .map(|_| Acquisition {
            gain: uniform(rng, (0.85, 1.15)),
            shift: (uniform(rng, (-0.04, 0.04)) * s, uniform(rng, (-0.04, 0.04)) * s),
        })
        .collect();
    LesionParams {
        course,
        rate,
        center,
        semi_axes,
        angle,
        intensity: [early, late, ser],
        texture,
        background: uniform(rng, (0.1, 0.35)),
        distractors,
        acquisitions,
    }
}

/// Logistic ramp about one pixel wide, so sub-pixel size changes stay visible.
fn soft_inside(signed_distance: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * signed_distance).exp())
}

/// Renders time point `t`.
pub fn render(params: &LesionParams, t: usize, size: usize, noise: &mut impl FnMut() -> f64) -> Array3<f32> {
    let scale = params.area_factor(t).sqrt();
    let (a, b) = (params.semi_axes.0 * scale, params.semi_axes.1 * scale);
    let (sin, cos) = params.angle.sin_cos();
    let acq = params.acquisitions.get(t).copied().unwrap_or(Acquisition {
        gain: 1.0,
        shift: (0.0, 0.0),
    });
    let mut img = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            // the whole field of view moves with the acquisition shift
            let (py, px) = (y as f64 - acq.shift.0, x as f64 - acq.shift.1);
            let (yn, xn) = (py / size as f64, px / size as f64);
            let tex: f64 = params
                .texture
                .iter()
                .map(|&(amp, fy, fx, ph)| amp * (2.0 * PI * (fy * yn + fx * xn) + ph).sin())
                .sum();
            let dy = py - params.center.0;
            let dx = px - params.center.1;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            let inside = soft_inside((1.0 - r) * a.min(b));
            let blob = params
                .distractors
                .iter()
                .map(|bl| {
                    let d = ((py - bl.center.0).powi(2) + (px - bl.center.1).powi(2)).sqrt();
                    bl.intensity * soft_inside(bl.radius - d)
                })
                .fold(0.0f64, f64::max);
            for c in 0..3 {
                let bg = (params.background * [1.0, 0.9, 0.6][c] + tex).max(blob * [1.0, 0.8, 0.5][c]);
                let lesion = params.intensity[c];
                let v = acq.gain * (bg + (lesion - bg).max(0.0) * inside) + noise();
                img[[c, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Generates `n_patients` series of [`NUM_TIME_POINTS`] images. Exactly
/// `round(n_patients * responder_fraction)` patients are responders.
pub fn synthesize_cohort(n_patients: usize, responder_fraction: f64, seed: u64) -> Result<SyntheticCohort> {
    synthesize_cohort_sized(n_patients, responder_fraction, seed, DEFAULT_IMAGE_SIZE)
}

pub fn synthesize_cohort_sized(
    n_patients: usize,
    responder_fraction: f64,
    seed: u64,
    image_size: usize,
) -> Result<SyntheticCohort> {
    if n_patients < 8 {
        return Err(Error::Config(format!("synthetic cohort needs at least 8 patients, got {n_patients}")));
    }
    if !(responder_fraction > 0.0 && responder_fraction < 1.0) {
        return Err(Error::Config(format!("responder_fraction {responder_fraction} outside (0, 1)")));
    }
    if image_size < 16 {
        return Err(Error::Config(format!("synthetic image size {image_size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = ((n_patients as f64 * responder_fraction).round() as usize).clamp(1, n_patients - 1);
    let mut labels: Vec<Outcome> = (0..n_patients)
        .map(|i| if i < n_pos { Outcome::Pcr } else { Outcome::NoPcr })
        .collect();
    labels.shuffle(&mut rng);
    let pixel_noise = Normal::new(0.0, 0.02).expect("valid std");
    let mut cohort = SyntheticCohort {
        patient_ids: Vec::with_capacity(n_patients),
        labels: labels.clone(),
        params: Vec::with_capacity(n_patients),
        images: Vec::with_capacity(n_patients),
    };
    for (i, &label) in labels.iter().enumerate() {
        let params = draw_params(&mut rng, label, image_size);
        let mut noise = || pixel_noise.sample(&mut rng);
        let images = (0..NUM_TIME_POINTS)
            .map(|t| render(&params, t, image_size, &mut noise))
            .collect();
        cohort.patient_ids.push(format!("syn{i:04}"));
        cohort.params.push(params);
        cohort.images.push(images);
    }
    Ok(cohort)
}
