//! Longitudinal cohort ingestion: volume preprocessing, axial MIPs, stratified
//! patient-level splits, the on-disk MIP cache and a synthetic cohort generator.

use std::path::PathBuf;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::losses::Outcome;

pub mod cache;
pub mod manifest;
pub mod synthetic;
pub mod volume;

pub use cache::{build_cache, load_cohort, write_synthetic_cache, PreprocessOptions, PreprocessSummary};
pub use manifest::{build_manifest, Manifest, ManifestRow, SplitAssignment, SplitFractions};
pub use synthetic::{synthesize_cohort, synthesize_cohort_sized, LesionCourse, LesionParams, SyntheticCohort};
pub use volume::{axial_mip, guarded_ser, preprocess_volume, read_volume, VolumeOptions};

/// Number of imaging time points per patient (pre-treatment through pre-surgery).
pub const NUM_TIME_POINTS: usize = 4;

/// DCE-derived maps, in channel order.
pub const MAP_NAMES: [&str; 3] = ["pe_early", "pe_late", "ser"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(crate::Error::DataQuality(format!("unknown split {other:?}"))),
        }
    }
}

/// Source files for one time point. `ser_path` is `None` when SER is recomputed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRef {
    pub pe_early_path: PathBuf,
    pub pe_late_path: PathBuf,
    pub ser_path: Option<PathBuf>,
    pub acquisition_time_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: Outcome,
    pub timepoints: Vec<VolumeRef>,
    pub split: Option<Split>,
}

/// One cached `[3, H, W]` MIP image.
#[derive(Clone, Debug, PartialEq)]
pub struct MipSample {
    pub image: Array3<f32>,
    pub patient_id: String,
    pub time_index: usize,
    pub label: Outcome,
}

/// A patient's full image series held in memory, ordered by time point.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientSeries {
    pub patient_id: String,
    pub label: Outcome,
    pub split: Split,
    pub images: Vec<Array3<f32>>,
}

impl PatientSeries {
    pub fn samples(&self) -> impl Iterator<Item = MipSample> + '_ {
        self.images.iter().enumerate().map(|(t, img)| MipSample {
            image: img.clone(),
            patient_id: self.patient_id.clone(),
            time_index: t,
            label: self.label,
        })
    }
}

pub fn in_split(cohort: &[PatientSeries], split: Split) -> Vec<PatientSeries> {
    cohort.iter().filter(|p| p.split == split).cloned().collect()
}
