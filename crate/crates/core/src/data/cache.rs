//! The on-disk MIP cache: one `.npy` array per (patient, time point) under
//! `mips/<patient>/t<k>.npy`, indexed by `manifest.csv` in the cache root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::SystemTime;

use log::{info, warn};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::manifest::read_labels;
use super::volume::{axial_mip, guarded_ser, preprocess_volume, read_volume, VolumeOptions};
use super::{
    build_manifest, Manifest, ManifestRow, PatientSeries, Split, SplitAssignment, SplitFractions, SyntheticCohort,
    MAP_NAMES, NUM_TIME_POINTS,
};
use crate::error::{Error, Result};
use crate::losses::Outcome;

pub const MANIFEST_FILE: &str = "manifest.csv";
const EXTENSIONS: [&str; 3] = ["nii.gz", "nii", "npy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    pub data_root: PathBuf,
    pub labels_path: PathBuf,
    pub cache_dir: PathBuf,
    pub volume: VolumeOptions,
    /// Recompute SER from the PE maps instead of reading the provided map.
    pub recompute_ser: bool,
    pub fractions: SplitFractions,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            labels_path: PathBuf::from("data/labels.csv"),
            cache_dir: PathBuf::from("cache"),
            volume: VolumeOptions::default(),
            recompute_ser: false,
            fractions: SplitFractions::default(),
            seed: 0,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub patients_cached: usize,
    /// `(patient_id, reason)`.
    pub patients_excluded: Vec<(String, String)>,
    pub volumes_read: usize,
    pub images_written: usize,
    pub images_up_to_date: usize,
    /// Unreadable or corrupt inputs. Non-empty means the run failed.
    pub errors: Vec<String>,
}

pub fn mip_relative_path(patient_id: &str, t: usize) -> PathBuf {
    PathBuf::from("mips").join(patient_id).join(format!("t{t}.npy"))
}

fn find_map(dir: &Path, name: &str) -> Option<PathBuf> {
    EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
}

fn mtime(path: &Path) -> Option<SystemTime> {
    fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// Writes `array` to `path` through a temporary sibling so readers never see a
/// partial file.
pub fn write_npy_atomic(path: &Path, array: &Array3<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::from(e).at(parent))?;
    }
    let tmp = path.with_extension("npy.tmp");
    ndarray_npy::write_npy(&tmp, array).map_err(|e| Error::DataQuality(format!("cannot write npy: {e}")).at(&tmp))?;
    fs::rename(&tmp, path).map_err(|e| Error::from(e).at(path))?;
    Ok(())
}

struct Job {
    patient_id: String,
    t: usize,
    sources: Vec<PathBuf>,
    target: PathBuf,
}

/// Reads the maps of one time point and stacks their axial MIPs into `[3, S, S]`.
fn process_timepoint(sources: &[PathBuf], options: &PreprocessOptions) -> Result<Array3<f32>> {
    let early = read_volume(&sources[0])?;
    let late = read_volume(&sources[1])?;
    let ser = if options.recompute_ser {
        guarded_ser(early.view(), late.view()).map_err(|e| e.at(&sources[0]))?
    } else {
        read_volume(&sources[2])?
    };
    let size = options.volume.size;
    let mut out = Array3::<f32>::zeros((3, size, size));
    for (c, (vol, src)) in [early, late, ser].iter().zip(sources.iter().cycle()).enumerate() {
        let pre = preprocess_volume(vol.view(), &options.volume).map_err(|e| e.at(src))?;
        out.index_axis_mut(Axis(0), c).assign(&axial_mip(pre.view()));
    }
    Ok(out)
}

/// Builds (or refreshes) the MIP cache and manifest from
/// `<data_root>/<patient>/T<k>/{pe_early,pe_late,ser}.{nii,nii.gz,npy}`.
///
/// Images whose cache file is newer than every source are left alone. A
/// patient missing any map is excluded with a warning; unreadable files are
/// collected in [`PreprocessSummary::errors`] and exclude the patient.
pub fn build_cache(options: &PreprocessOptions) -> Result<PreprocessSummary> {
    let labels = read_labels(&options.labels_path)?;
    let root = &options.data_root;
    if !root.is_dir() {
        return Err(Error::Config(format!("data root {} is not a directory", root.display())));
    }
    let mut summary = PreprocessSummary::default();
    let label_map: BTreeMap<_, _> = labels.iter().cloned().collect();

    let mut on_disk = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::from(e).at(root))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            on_disk.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    on_disk.sort();
    for pid in &on_disk {
        if !label_map.contains_key(pid) {
            warn!("patient directory {pid} has no label; skipped");
            summary.patients_excluded.push((pid.clone(), "no label".into()));
        }
    }

    let needed: Vec<&str> = if options.recompute_ser { vec![MAP_NAMES[0], MAP_NAMES[1]] } else { MAP_NAMES.to_vec() };
    let mut jobs = Vec::new();
    let mut candidates = Vec::new();
    'patients: for (pid, label) in &labels {
        let mut patient_jobs = Vec::new();
        for t in 0..NUM_TIME_POINTS {
            let dir = root.join(pid).join(format!("T{t}"));
            let mut sources = Vec::new();
            for name in &needed {
                match find_map(&dir, name) {
                    Some(p) => sources.push(p),
                    None => {
                        warn!("patient {pid}: missing {name} at T{t}; excluded");
                        summary.patients_excluded.push((pid.clone(), format!("missing {name} at T{t}")));
                        continue 'patients;
                    }
                }
            }
            patient_jobs.push(Job {
                patient_id: pid.clone(),
                t,
                target: options.cache_dir.join(mip_relative_path(pid, t)),
                sources,
            });
        }
        candidates.push((pid.clone(), *label));
        jobs.extend(patient_jobs);
    }

    let pending: Vec<&Job> = jobs
        .iter()
        .filter(|job| {
            let fresh = match mtime(&job.target) {
                Some(out) => job.sources.iter().all(|s| mtime(s).is_some_and(|m| m <= out)),
                None => false,
            };
            if fresh {
                summary.images_up_to_date += 1;
            }
            !fresh
        })
        .collect();

    let workers = match options.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(pending.len().max(1));
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(String, String)>> = Mutex::new(Vec::new());
    let volumes_read = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = pending.get(i) else { break };
                volumes_read.fetch_add(job.sources.len(), Ordering::Relaxed);
                let result = process_timepoint(&job.sources, options).and_then(|mip| write_npy_atomic(&job.target, &mip));
                if let Err(e) = result {
                    failures.lock().expect("poisoned").push((job.patient_id.clone(), format!("T{}: {e}", job.t)));
                }
            });
        }
    });
    summary.volumes_read = volumes_read.into_inner();
    let mut failures = failures.into_inner().expect("poisoned");
    failures.sort();
    summary.images_written = pending.len() - failures.len();
    for (pid, msg) in &failures {
        summary.errors.push(format!("{pid} {msg}"));
    }
    candidates.retain(|(pid, _)| {
        let failed = failures.iter().any(|(f, _)| f == pid);
        if failed {
            summary.patients_excluded.push((pid.clone(), "unreadable input".into()));
        }
        !failed
    });

    let assignment = build_manifest(&candidates, &options.fractions, options.seed)?;
    let manifest = manifest_for(&candidates, &assignment)?;
    fs::create_dir_all(&options.cache_dir).map_err(|e| Error::from(e).at(&options.cache_dir))?;
    manifest.write(&options.cache_dir.join(MANIFEST_FILE))?;
    summary.patients_cached = candidates.len();
    info!(
        "cached {} patients ({} images written, {} up to date, {} errors)",
        summary.patients_cached,
        summary.images_written,
        summary.images_up_to_date,
        summary.errors.len()
    );
    Ok(summary)
}

fn manifest_for(patients: &[(String, Outcome)], assignment: &SplitAssignment) -> Result<Manifest> {
    let mut rows = Vec::with_capacity(patients.len() * NUM_TIME_POINTS);
    for (pid, label) in patients {
        let split = assignment
            .get(pid)
            .ok_or_else(|| Error::DataQuality(format!("patient {pid} has no split")))?;
        for t in 0..NUM_TIME_POINTS {
            rows.push(ManifestRow {
                patient_id: pid.clone(),
                time_index: t,
                label: label.label(),
                split,
                path: mip_relative_path(pid, t),
            });
        }
    }
    Ok(Manifest { rows })
}

/// Writes a synthetic cohort in the cache layout, plus its generative
/// parameters as `synthetic_params.json`.
pub fn write_synthetic_cache(cohort: &SyntheticCohort, assignment: &SplitAssignment, cache_dir: &Path) -> Result<Manifest> {
    for (pid, images) in cohort.patient_ids.iter().zip(&cohort.images) {
        for (t, img) in images.iter().enumerate() {
            write_npy_atomic(&cache_dir.join(mip_relative_path(pid, t)), img)?;
        }
    }
    let manifest = manifest_for(&cohort.labels_table(), assignment)?;
    manifest.write(&cache_dir.join(MANIFEST_FILE))?;
    let params: BTreeMap<_, _> = cohort.patient_ids.iter().zip(&cohort.params).collect();
    let path = cache_dir.join("synthetic_params.json");
    fs::write(&path, serde_json::to_vec_pretty(&params)?).map_err(|e| Error::from(e).at(&path))?;
    Ok(manifest)
}

/// Loads every patient series listed in the cache manifest.
///
/// Fails if a patient spans two splits, lacks a time point, has inconsistent
/// labels, or any image is outside `[0, 1]`.
pub fn load_cohort(cache_dir: &Path) -> Result<Vec<PatientSeries>> {
    let manifest_path = cache_dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Config(format!(
            "no manifest at {}; run preprocess first",
            manifest_path.display()
        )));
    }
    let manifest = Manifest::read(&manifest_path)?;
    let mut grouped: BTreeMap<String, Vec<&ManifestRow>> = BTreeMap::new();
    for row in &manifest.rows {
        grouped.entry(row.patient_id.clone()).or_default().push(row);
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (pid, mut rows) in grouped {
        rows.sort_by_key(|r| r.time_index);
        let times: Vec<usize> = rows.iter().map(|r| r.time_index).collect();
        if times != (0..NUM_TIME_POINTS).collect::<Vec<_>>() {
            return Err(Error::DataQuality(format!("patient {pid} has time points {times:?}")));
        }
        let split: Split = rows[0].split;
        if rows.iter().any(|r| r.split != split) {
            return Err(Error::DataQuality(format!("patient {pid} appears in more than one split")));
        }
        let label = rows[0].label;
        if rows.iter().any(|r| r.label != label) {
            return Err(Error::DataQuality(format!("patient {pid} has inconsistent labels")));
        }
        let mut images = Vec::with_capacity(NUM_TIME_POINTS);
        for row in rows {
            let path = cache_dir.join(&row.path);
            let img: Array3<f32> = ndarray_npy::read_npy(&path)
                .map_err(|e| Error::DataQuality(format!("cannot read cached MIP: {e}")).at(&path))?;
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::DataQuality("cached MIP outside [0, 1] or non-finite".into()).at(&path));
            }
            images.push(img);
        }
        let shape = images[0].dim();
        if images.iter().any(|i| i.dim() != shape) {
            return Err(Error::DataQuality(format!("patient {pid} has images of differing shape")));
        }
        out.push(PatientSeries {
            patient_id: pid,
            label: Outcome::from_label(label)?,
            split,
            images,
        });
    }
    Ok(out)
}
