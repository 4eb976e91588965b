use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::slices::{extract_plane, Plane, SliceRange};
use super::volume::{Label, Volume};
use super::windows::{build_windows, WindowPair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub range: SliceRange,
    pub in_len: usize,
    pub out_len: usize,
    pub stride: usize,
    /// Healthy subjects drawn (by `seed`) into the test set when
    /// `test_subjects` is empty.
    pub holdout_healthy: usize,
    /// Explicit healthy test subjects; overrides `holdout_healthy`.
    pub test_subjects: Vec<String>,
    /// Explicit training subjects; every other healthy subject is unused.
    pub train_subjects: Vec<String>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            range: SliceRange::FULL_SCALE,
            in_len: 3,
            out_len: 3,
            stride: 1,
            holdout_healthy: 3,
            test_subjects: Vec::new(),
            train_subjects: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub subject_id: String,
    pub scan_id: String,
    pub timepoint: u32,
    pub label: Label,
    pub partition: Partition,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub plane: Plane,
    pub config: SplitConfig,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub train_scans: usize,
    pub test_scans: usize,
    pub scans: Vec<ScanEntry>,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
    pub manifest: SplitManifest,
}

fn choose_test_subjects(
    volumes: &[Volume],
    config: &SplitConfig,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let mut healthy: BTreeSet<String> = BTreeSet::new();
    let mut other: BTreeSet<String> = BTreeSet::new();
    for v in volumes {
        match v.meta.label {
            Label::Healthy => healthy.insert(v.meta.subject_id.clone()),
            _ => other.insert(v.meta.subject_id.clone()),
        };
    }
    // A subject with any non-healthy scan never trains.
    let healthy: BTreeSet<String> = healthy.difference(&other).cloned().collect();

    let explicit_train: BTreeSet<String> = config.train_subjects.iter().cloned().collect();
    for s in &explicit_train {
        if !healthy.contains(s) {
            return Err(Error::Leakage(format!(
                "training subject `{s}` is not an all-healthy subject in the cohort"
            )));
        }
    }

    let test_healthy: BTreeSet<String> = if !config.test_subjects.is_empty() {
        let chosen: BTreeSet<String> = config.test_subjects.iter().cloned().collect();
        if let Some(s) = chosen.intersection(&explicit_train).next() {
            return Err(Error::Leakage(format!(
                "subject `{s}` requested in both train and test"
            )));
        }
        chosen.into_iter().filter(|s| healthy.contains(s)).collect()
    } else {
        if config.holdout_healthy == 0 {
            return Err(Error::Config(
                "at least one healthy subject must be held out for testing".into(),
            ));
        }
        let mut pool: Vec<String> = healthy.difference(&explicit_train).cloned().collect();
        if config.holdout_healthy > pool.len() {
            return Err(Error::Leakage(format!(
                "{} healthy subjects available, cannot hold out {}",
                pool.len(),
                config.holdout_healthy
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        pool.shuffle(&mut rng);
        pool.into_iter().take(config.holdout_healthy).collect()
    };
    if test_healthy.is_empty() {
        return Err(Error::Config(
            "at least one healthy subject must be held out for testing".into(),
        ));
    }

    let train: BTreeSet<String> = if explicit_train.is_empty() {
        healthy.difference(&test_healthy).cloned().collect()
    } else {
        explicit_train
    };
    if train.is_empty() {
        return Err(Error::Leakage(
            "no healthy subject left for training without sharing subjects with the test set"
                .into(),
        ));
    }
    let test: BTreeSet<String> = test_healthy.union(&other).cloned().collect();
    Ok((train, test))
}

/// Subject-disjoint split: training windows come only from healthy subjects,
/// everything else that is not training goes to test.
pub fn make_split(volumes: &[Volume], plane: Plane, config: &SplitConfig) -> Result<DatasetSplit> {
    if volumes.is_empty() {
        return Err(Error::EmptyData("no volumes to split".into()));
    }
    let (train_subjects, test_subjects) = choose_test_subjects(volumes, config)?;

    let per_volume: Vec<Result<Vec<WindowPair>>> = volumes
        .par_iter()
        .map(|v| {
            let seq = extract_plane(v, plane, config.range)?;
            build_windows(&seq, config.in_len, config.out_len, config.stride)
        })
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut entries = Vec::new();
    for (v, windows) in volumes.iter().zip(per_volume) {
        let windows = windows?;
        let partition = if train_subjects.contains(&v.meta.subject_id) {
            Partition::Train
        } else if test_subjects.contains(&v.meta.subject_id) {
            Partition::Test
        } else {
            continue;
        };
        entries.push(ScanEntry {
            subject_id: v.meta.subject_id.clone(),
            scan_id: v.meta.scan_id.clone(),
            timepoint: v.meta.timepoint,
            label: v.meta.label,
            partition,
            windows: windows.len(),
        });
        match partition {
            Partition::Train => train.extend(windows),
            Partition::Test => test.extend(windows),
        }
    }

    let count = |p: Partition| entries.iter().filter(|e| e.partition == p).count();
    let subjects = |p: Partition| {
        entries
            .iter()
            .filter(|e| e.partition == p)
            .map(|e| e.subject_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    };
    let manifest = SplitManifest {
        plane,
        config: config.clone(),
        train_subjects: subjects(Partition::Train),
        test_subjects: subjects(Partition::Test),
        train_scans: count(Partition::Train),
        test_scans: count(Partition::Test),
        scans: entries,
    };
    Ok(DatasetSplit {
        train,
        test,
        manifest,
    })
}

/// Windows grouped by subject, in first-appearance order.
pub fn group_by_subject(windows: &[WindowPair]) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        groups.entry(w.subject_id.clone()).or_default().push(i);
    }
    groups
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;

    use super::*;
    use crate::data::volume::ScanMeta;

    fn vol(subject: &str, t: u32, label: Label, extent: usize) -> Volume {
        let vox =
            Array3::from_shape_fn((4, 4, extent), |(x, y, z)| (x + y + z + t as usize) as f64);
        Volume::new(
            vox,
            ScanMeta::new(subject, format!("{subject}_t{t}"), t, label),
        )
        .unwrap()
    }

    fn roster() -> Vec<Volume> {
        let mut v = Vec::new();
        for s in 0..15 {
            for t in 0..2 {
                v.push(vol(&format!("hc{s:02}"), t, Label::Healthy, 16));
            }
        }
        for s in 0..20 {
            for t in 0..2 {
                v.push(vol(&format!("asd{s:02}"), t, Label::Anomalous, 16));
            }
        }
        v
    }

    fn desk_config() -> SplitConfig {
        SplitConfig {
            range: SliceRange::new(0, 16),
            holdout_healthy: 3,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn cohort_shaped_roster() {
        let split = make_split(&roster(), Plane::Axial, &desk_config()).unwrap();
        let m = &split.manifest;
        assert_eq!(m.train_subjects, 12);
        assert_eq!(m.train_scans, 24);
        assert_eq!(m.test_scans, 46);
        assert_eq!(m.test_subjects, 23);
        let train: BTreeSet<_> = split.train.iter().map(|w| w.subject_id.clone()).collect();
        let test: BTreeSet<_> = split.test.iter().map(|w| w.subject_id.clone()).collect();
        assert!(train.is_disjoint(&test));
        assert!(split.train.iter().all(|w| w.label == Label::Healthy));
        assert_eq!(split.train.len(), 24 * 11);
    }

    #[test]
    fn single_subject_cannot_split() {
        let v = vec![
            vol("only", 0, Label::Healthy, 16),
            vol("only", 1, Label::Healthy, 16),
        ];
        assert_eq!(
            make_split(&v, Plane::Axial, &desk_config())
                .unwrap_err()
                .code(),
            "LEAKAGE_ERROR"
        );
    }

    #[test]
    fn overlapping_explicit_lists_leak() {
        let cfg = SplitConfig {
            train_subjects: vec!["hc00".into(), "hc01".into()],
            test_subjects: vec!["hc01".into()],
            ..desk_config()
        };
        assert_eq!(
            make_split(&roster(), Plane::Axial, &cfg)
                .unwrap_err()
                .code(),
            "LEAKAGE_ERROR"
        );
        let cfg = SplitConfig {
            train_subjects: vec!["asd00".into()],
            ..desk_config()
        };
        assert_eq!(
            make_split(&roster(), Plane::Axial, &cfg)
                .unwrap_err()
                .code(),
            "LEAKAGE_ERROR"
        );
    }

    #[test]
    fn four_healthy_two_anomalous_sixty_slices() {
        let mut v: Vec<Volume> = (0..4)
            .map(|s| vol(&format!("h{s}"), 0, Label::Healthy, 64))
            .collect();
        v.extend((0..2).map(|s| vol(&format!("a{s}"), 0, Label::Anomalous, 64)));
        let cfg = SplitConfig {
            range: SliceRange::new(2, 62),
            holdout_healthy: 1,
            ..Default::default()
        };
        let split = make_split(&v, Plane::Axial, &cfg).unwrap();
        assert_eq!(split.train.len(), 3 * 55);
        assert_eq!(split.test.len(), 3 * 55);
    }

    #[test]
    fn manifest_is_deterministic() {
        let a = make_split(&roster(), Plane::Axial, &desk_config()).unwrap();
        let b = make_split(&roster(), Plane::Axial, &desk_config()).unwrap();
        assert_eq!(a.manifest.to_json().unwrap(), b.manifest.to_json().unwrap());
    }
}
