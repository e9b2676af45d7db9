//! Patient-level stratified splits and the cohort manifest file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};
use crate::losses::Outcome;

/// Minimum patients per class for a stratified split.
pub const MIN_PER_CLASS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|&x| !(x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be >= 0 and sum to 1, got {f:?}")));
        }
        Ok(())
    }
}

/// Splits `n` items by floor-then-largest-remainder; ties go to the earlier split.
pub fn split_counts(n: usize, fractions: &SplitFractions) -> [usize; 3] {
    let exact: Vec<f64> = fractions.as_array().iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        // remainders within 1e-9 count as tied; 392 * 0.7 is not exactly 274.4
        if (fa - fb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            fb.total_cmp(&fa)
        }
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Patient id -> split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment(pub BTreeMap<String, Split>);

impl SplitAssignment {
    pub fn get(&self, patient_id: &str) -> Option<Split> {
        self.0.get(patient_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.0.values().filter(|&&s| s == split).count()
    }

    pub fn members(&self, split: Split) -> Vec<&str> {
        self.0.iter().filter(|(_, &s)| s == split).map(|(k, _)| k.as_str()).collect()
    }
}

/// Stratified patient-level split. Each class is shuffled independently and
/// divided by [`split_counts`], so per-split prevalence tracks the cohort's.
pub fn build_manifest(patients: &[(String, Outcome)], fractions: &SplitFractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    let mut by_class: BTreeMap<u8, Vec<&str>> = BTreeMap::new();
    for (id, label) in patients {
        by_class.entry(label.label()).or_default().push(id.as_str());
    }
    for class in [0u8, 1] {
        let n = by_class.get(&class).map_or(0, Vec::len);
        if n < MIN_PER_CLASS {
            return Err(Error::Stratification(format!(
                "class {class} has {n} patients; at least {MIN_PER_CLASS} are required"
            )));
        }
    }
    let mut out = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::DataQuality("duplicate patient id".into()));
        }
        ids.shuffle(&mut rng);
        let counts = split_counts(ids.len(), fractions);
        let mut it = ids.iter();
        for (split, &c) in Split::ALL.iter().zip(&counts) {
            for id in it.by_ref().take(c) {
                out.insert((*id).to_string(), *split);
            }
        }
    }
    Ok(SplitAssignment(out))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub time_index: usize,
    pub label: u8,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

/// One row per cached (patient, time point) image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::from(e).at(path))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::from(e).at(path))?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn assignment(&self) -> SplitAssignment {
        SplitAssignment(self.rows.iter().map(|r| (r.patient_id.clone(), r.split)).collect())
    }
}

/// Reads a `patient_id,pcr` table.
pub fn read_labels(path: &Path) -> Result<Vec<(String, Outcome)>> {
    #[derive(Deserialize)]
    struct Row {
        patient_id: String,
        pcr: u8,
    }
    if !path.is_file() {
        return Err(Error::Config(format!("labels table {} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::from(e).at(path))?;
    let mut out = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(|e| Error::from(e).at(path))?;
        out.push((row.patient_id, Outcome::from_label(row.pcr)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize, positives: usize) -> Vec<(String, Outcome)> {
        (0..n)
            .map(|i| {
                let label = if i < positives { Outcome::Pcr } else { Outcome::NoPcr };
                (format!("p{i:04}"), label)
            })
            .collect()
    }

    fn prevalence(a: &SplitAssignment, c: &[(String, Outcome)], split: Split) -> f64 {
        let members: Vec<_> = c.iter().filter(|(id, _)| a.get(id) == Some(split)).collect();
        members.iter().filter(|(_, l)| l.is_responder()).count() as f64 / members.len() as f64
    }

    #[test]
    fn reference_cohort_sizes() {
        // 585 patients, 33% pCR -> 193 positives
        let c = cohort(585, 193);
        let a = build_manifest(&c, &SplitFractions::default(), 0).unwrap();
        let sizes = [a.count(Split::Train), a.count(Split::Val), a.count(Split::Test)];
        assert_eq!(sizes, [410, 58, 117]);
        let global = 193.0 / 585.0;
        for s in Split::ALL {
            assert!((prevalence(&a, &c, s) - global).abs() <= 0.02, "{s:?}");
        }
    }

    #[test]
    fn balanced_cohort_stays_balanced() {
        let c = cohort(100, 50);
        let a = build_manifest(&c, &SplitFractions::default(), 3).unwrap();
        for s in Split::ALL {
            assert!((prevalence(&a, &c, s) - 0.5).abs() <= 0.02);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let c = cohort(60, 20);
        let f = SplitFractions::default();
        assert_eq!(build_manifest(&c, &f, 1).unwrap(), build_manifest(&c, &f, 1).unwrap());
        assert_ne!(build_manifest(&c, &f, 1).unwrap(), build_manifest(&c, &f, 2).unwrap());
    }

    #[test]
    fn too_few_per_class() {
        let c = cohort(40, 9);
        assert!(matches!(
            build_manifest(&c, &SplitFractions::default(), 0),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn counts_round_by_largest_remainder() {
        assert_eq!(split_counts(66, &SplitFractions::default()), [46, 7, 13]);
        assert_eq!(split_counts(134, &SplitFractions::default()), [94, 13, 27]);
        assert_eq!(split_counts(10, &SplitFractions::default()), [7, 1, 2]);
    }

    #[test]
    fn manifest_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            rows: vec![ManifestRow {
                patient_id: "a".into(),
                time_index: 2,
                label: 1,
                split: Split::Val,
                path: "mips/a/t2.npy".into(),
            }],
        };
        let p = dir.path().join("manifest.csv");
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
    }
}
