use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Plane;
use crate::models::{ModelKind, ModelSpec};

struct Identity;

impl Reconstruct for Identity {
    fn check(&self, _: &WindowPair) -> Result<()> {
        Ok(())
    }

    fn predict(&self, inputs: &[&SliceStack]) -> Vec<f64> {
        inputs.iter().flat_map(|s| s.values().to_vec()).collect()
    }
}

fn stack(seed: u64, h: usize, w: usize) -> SliceStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SliceStack {
        data: Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.05..1.0)),
        plane: Plane::Axial,
        indices: vec![0, 1, 2],
    }
}

fn pair(scan: &str, k: usize, same: bool) -> WindowPair {
    let input = stack(k as u64, 16, 16);
    WindowPair {
        target: if same {
            input.clone()
        } else {
            stack(1000 + k as u64, 16, 16)
        },
        input,
        subject_id: scan.split('_').next().unwrap().into(),
        scan_id: scan.into(),
        timepoint: 0,
        label: Label::Healthy,
        plane: Plane::Axial,
        window_index: k,
    }
}

fn entry(scan: &str, k: usize, score: f64) -> ScoreEntry {
    ScoreEntry {
        subject_id: scan.split('_').next().unwrap().into(),
        scan_id: scan.into(),
        window_index: k,
        score,
        label: Label::Healthy,
    }
}

fn table(groups: &[&[f64]]) -> ScoreTable {
    let entries = groups
        .iter()
        .enumerate()
        .flat_map(|(i, g)| {
            g.iter()
                .enumerate()
                .map(move |(k, &s)| entry(&format!("s{i}_t0"), k, s))
        })
        .collect();
    ScoreTable::new(DistanceMetric::L2, entries).unwrap()
}

#[test]
fn identity_scores_zero() {
    for metric in DistanceMetric::ALL {
        let s = window_score(&Identity, &pair("a_t0", 0, true), metric).unwrap();
        assert!(s.abs() <= 1e-12, "{metric}: {s}");
    }
}

#[test]
fn combined_metric_is_the_sum() {
    let p = pair("a_t0", 3, false);
    let l2 = window_score(&Identity, &p, DistanceMetric::L2).unwrap();
    let cos = window_score(&Identity, &p, DistanceMetric::Cosine).unwrap();
    let both = window_score(&Identity, &p, DistanceMetric::L2PlusCosine).unwrap();
    assert!((both - (l2 + cos)).abs() <= 1e-12);
}

#[test]
fn model_geometry_and_plane_checked() {
    let spec = ModelSpec::new(ModelKind::UNet33, 16, 16)
        .with_widths(4, 4)
        .with_plane(Plane::Coronal);
    let model = Model::build(&spec).unwrap();
    let err = window_score(&model, &pair("a_t0", 0, false), DistanceMetric::L2).unwrap_err();
    assert_eq!(err.code(), "GEOMETRY_ERROR");
    let model = Model::build(&ModelSpec::new(ModelKind::UNet33, 32, 32).with_widths(4, 4)).unwrap();
    let err = window_score(&model, &pair("a_t0", 0, false), DistanceMetric::L2).unwrap_err();
    assert_eq!(err.code(), "GEOMETRY_ERROR");
    let model = Model::build(&ModelSpec::new(ModelKind::UNet33, 16, 16).with_widths(4, 4)).unwrap();
    let s = window_score(&model, &pair("a_t0", 0, false), DistanceMetric::L2).unwrap();
    assert!(s > 0.0);
}

#[test]
fn batched_scores_match_single_scores() {
    let model = Model::build(&ModelSpec::new(ModelKind::Gan33, 16, 16).with_widths(8, 8)).unwrap();
    let windows: Vec<WindowPair> = (0..11).map(|k| pair("a_t0", k, false)).collect();
    let batched = window_scores(&model, &windows, DistanceMetric::L2PlusCosine).unwrap();
    for (w, b) in windows.iter().zip(&batched) {
        let single = window_score(&model, w, DistanceMetric::L2PlusCosine).unwrap();
        assert!((single - b).abs() <= 1e-12);
    }
}

#[test]
fn table_groups_by_scan() {
    let t = table(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
    let means: Vec<f64> = t.scans().iter().map(|s| s.mean).collect();
    assert_eq!(means, vec![2.0, 5.0]);
    let single = table(&[&[0.5]]);
    assert_eq!((single.scans().len(), single.scans()[0].windows), (1, 1));
    assert_eq!(
        build_score_table(&Identity, &[], DistanceMetric::L2)
            .unwrap_err()
            .code(),
        "EMPTY_DATA_ERROR"
    );
}

#[test]
fn thresholds_worked_example() {
    let t = table(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
    let th = |k| compute_threshold(&t, k).unwrap().value;
    assert_eq!(th(ThresholdKind::Avg), 3.5);
    assert_eq!(th(ThresholdKind::Max), 6.0);
    assert_eq!(th(ThresholdKind::Min), 1.0);
    let flat = table(&[&[2.0, 2.0, 2.0]]);
    for kind in ThresholdKind::ALL {
        assert_eq!(compute_threshold(&flat, kind).unwrap().value, 2.0);
    }
    assert_eq!(
        compute_threshold(&t, ThresholdKind::Avg)
            .unwrap()
            .provenance,
        t.hash()
    );
}

#[test]
fn subject_unit_averages_subject_means() {
    // Subject a has two scans (means 1 and 3), subject b one scan (mean 8).
    let entries = vec![
        entry("a_t0", 0, 1.0),
        entry("a_t1", 0, 3.0),
        entry("b_t0", 0, 8.0),
    ];
    let t = ScoreTable::new(DistanceMetric::L2, entries).unwrap();
    assert_eq!(
        compute_threshold(&t, ThresholdKind::Avg).unwrap().value,
        4.0
    );
    let subj = compute_threshold_with(&t, ThresholdKind::Avg, ThresholdUnit::Subject).unwrap();
    assert_eq!(subj.value, 5.0);
}

#[test]
fn classification_and_ties() {
    let th = compute_threshold(&table(&[&[2.0]]), ThresholdKind::Avg).unwrap();
    assert_eq!(classify_scan(1.8, &th).unwrap(), Decision::Inlier);
    assert_eq!(classify_scan(2.2, &th).unwrap(), Decision::Outlier);
    assert_eq!(classify_scan(2.0, &th).unwrap(), Decision::Inlier);
    assert_eq!(
        classify_scan_with(2.0, &th, TieRule::Outlier).unwrap(),
        Decision::Outlier
    );
    assert_eq!(
        classify_scan(f64::NAN, &th).unwrap_err().code(),
        "NONFINITE_ERROR"
    );
}

#[test]
fn csv_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let entries: Vec<ScoreEntry> = (0..20)
        .map(|k| entry(&format!("s{}_t0", k % 4), k, rng.random()))
        .collect();
    let t = ScoreTable::new(DistanceMetric::Cosine, entries).unwrap();
    let back = ScoreTable::read_csv(DistanceMetric::Cosine, t.to_csv().as_bytes()).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.hash(), t.hash());
    assert_ne!(
        ScoreTable::new(DistanceMetric::L2, t.entries().to_vec())
            .unwrap()
            .hash(),
        t.hash()
    );
}

#[test]
fn metric_names_parse() {
    for m in DistanceMetric::ALL {
        assert_eq!(m.to_string().parse::<DistanceMetric>().unwrap(), m);
    }
    assert_eq!(
        "l2+cosine".parse::<DistanceMetric>().unwrap(),
        DistanceMetric::L2PlusCosine
    );
    assert_eq!(
        "hamming".parse::<DistanceMetric>().unwrap_err().code(),
        "CONFIG_ERROR"
    );
}

fn random_table(rng: &mut ChaCha8Rng) -> (ScoreTable, Vec<Vec<f64>>) {
    let scans = rng.random_range(1..8);
    let groups: Vec<Vec<f64>> = (0..scans)
        .map(|_| {
            (0..rng.random_range(1..12))
                .map(|_| rng.random_range(0.0..10.0))
                .collect()
        })
        .collect();
    let refs: Vec<&[f64]> = groups.iter().map(|g| g.as_slice()).collect();
    (table(&refs), groups)
}

#[test]
fn threshold_order_and_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (t, groups) = random_table(&mut rng);
        let v = |k| compute_threshold(&t, k).unwrap().value;
        let (avg, max, min) = (
            v(ThresholdKind::Avg),
            v(ThresholdKind::Max),
            v(ThresholdKind::Min),
        );
        assert!(min <= avg && avg <= max);
        let means: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().sum::<f64>() / g.len() as f64)
            .collect();
        assert!((avg - means.iter().sum::<f64>() / means.len() as f64).abs() <= 1e-12);
        let all = groups.iter().flatten();
        assert_eq!(max, all.clone().cloned().fold(f64::MIN, f64::max));
        assert_eq!(min, all.cloned().fold(f64::MAX, f64::min));
        for (s, m) in t.scans().iter().zip(&means) {
            assert!((s.mean - m).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn raising_a_score_never_clears_an_outlier(score in 0.0f64..10.0, bump in 0.0f64..5.0, tau in 0.1f64..10.0) {
        for tie in [TieRule::Inlier, TieRule::Outlier] {
            let before = decide(score, tau, tie).unwrap();
            let after = decide(score + bump, tau, tie).unwrap();
            prop_assert!(after >= before);
        }
    }

    #[test]
    fn scaling_preserves_decisions(seed in 0u64..1000, c in 0.01f64..100.0, probe in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, groups) = random_table(&mut rng);
        let scaled: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| v * c).collect()).collect();
        let refs: Vec<&[f64]> = scaled.iter().map(|g| g.as_slice()).collect();
        let ts = table(&refs);
        for kind in ThresholdKind::ALL {
            let a = compute_threshold(&t, kind).unwrap().value;
            let b = compute_threshold(&ts, kind).unwrap().value;
            prop_assert!((b - c * a).abs() <= 1e-9 * b.abs().max(1.0));
            // Keep clear of the boundary, where rounding of c * x may differ.
            if (probe - a).abs() > 1e-9 * a.max(1.0) {
                prop_assert_eq!(decide(probe, a, TieRule::Inlier).unwrap(), decide(probe * c, b, TieRule::Inlier).unwrap());
            }
        }
    }
}
