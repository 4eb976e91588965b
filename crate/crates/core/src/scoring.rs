//! Reconstruction distances, score tables, thresholds and scan decisions.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Label, SliceStack, WindowPair};
use crate::error::{Error, Result};
use crate::models::{batch_tensor, Model, TrainedModel};
use crate::training::losses;

/// Windows scored per forward pass.
const SCORE_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DistanceMetric {
    L2,
    Cosine,
    /// Unweighted sum of the L2 and cosine distances.
    L2PlusCosine,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::L2,
        DistanceMetric::Cosine,
        DistanceMetric::L2PlusCosine,
    ];

    /// Distance between a reconstruction and its target, both flattened.
    pub fn distance(self, recon: &[f64], target: &[f64]) -> Result<f64> {
        // Rounding can push 1 - cos(x, x) a hair below zero.
        let cos = || losses::cosine(recon, target).map(|c| c.max(0.0));
        let d = match self {
            DistanceMetric::L2 => losses::l2(recon, target)?,
            DistanceMetric::Cosine => cos()?,
            DistanceMetric::L2PlusCosine => losses::l2(recon, target)? + cos()?,
        };
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("{self} distance")));
        }
        Ok(d)
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::L2 => "L2",
            DistanceMetric::Cosine => "COSINE",
            DistanceMetric::L2PlusCosine => "L2_PLUS_COSINE",
        })
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_uppercase()
            .replace(['-', '+'], "_")
            .as_str()
        {
            "L2" => Ok(DistanceMetric::L2),
            "COSINE" | "COS" => Ok(DistanceMetric::Cosine),
            "L2_PLUS_COSINE" | "L2_COSINE" | "L2_COS" => Ok(DistanceMetric::L2PlusCosine),
            _ => Err(Error::Config(format!("unknown distance metric `{s}`"))),
        }
    }
}

/// Anything that maps input stacks to predicted target stacks.
pub trait Reconstruct: Sync {
    /// Fails with `GEOMETRY_ERROR` when `pair` cannot be fed to the model.
    fn check(&self, pair: &WindowPair) -> Result<()>;
    /// Predicted targets, flattened and concatenated in input order.
    fn predict(&self, inputs: &[&SliceStack]) -> Vec<f64>;
}

impl Reconstruct for Model {
    fn check(&self, pair: &WindowPair) -> Result<()> {
        self.check_input(&pair.input)?;
        let (c, h, w) = pair.target.dims();
        let spec = self.spec();
        if (c, h, w) != (spec.out_channels, spec.height, spec.width) {
            return Err(Error::Geometry(format!(
                "model predicts {}x{}x{}, target is {h}x{w}x{c}",
                spec.height, spec.width, spec.out_channels
            )));
        }
        if let Some(plane) = spec.plane.filter(|&p| p != pair.plane) {
            return Err(Error::Geometry(format!(
                "model trained on {plane} plane, window is {}",
                pair.plane
            )));
        }
        Ok(())
    }

    fn predict(&self, inputs: &[&SliceStack]) -> Vec<f64> {
        self.reconstruct(&batch_tensor(inputs)).to_vec()
    }
}

impl Reconstruct for TrainedModel {
    fn check(&self, pair: &WindowPair) -> Result<()> {
        self.model.check(pair)
    }

    fn predict(&self, inputs: &[&SliceStack]) -> Vec<f64> {
        self.model.predict(inputs)
    }
}

/// Distance between the model's prediction for `pair.input` and `pair.target`.
pub fn window_score(
    model: &impl Reconstruct,
    pair: &WindowPair,
    metric: DistanceMetric,
) -> Result<f64> {
    model.check(pair)?;
    metric.distance(&model.predict(&[&pair.input]), pair.target.values())
}

/// Scores for every window, batched; results keep input order.
pub fn window_scores(
    model: &impl Reconstruct,
    windows: &[WindowPair],
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    for w in windows {
        model.check(w)?;
    }
    let chunks: Vec<Result<Vec<f64>>> = windows
        .par_chunks(SCORE_BATCH)
        .map(|chunk| {
            let inputs: Vec<&SliceStack> = chunk.iter().map(|w| &w.input).collect();
            let recon = model.predict(&inputs);
            let per = recon.len() / chunk.len();
            chunk
                .iter()
                .zip(recon.chunks(per))
                .map(|(w, r)| metric.distance(r, w.target.values()))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(windows.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// One window's score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub subject_id: String,
    pub scan_id: String,
    pub window_index: usize,
    pub score: f64,
    pub label: Label,
}

/// Per-scan aggregate of window scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanScore {
    pub subject_id: String,
    pub scan_id: String,
    pub label: Label,
    pub windows: usize,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

/// Window scores grouped by scan. Scans are ordered by scan id and windows
/// by index, so equal inputs always produce equal tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub metric: DistanceMetric,
    entries: Vec<ScoreEntry>,
    scans: Vec<ScanScore>,
}

impl ScoreTable {
    pub fn new(metric: DistanceMetric, mut entries: Vec<ScoreEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyData("score table without windows".into()));
        }
        if let Some(e) = entries
            .iter()
            .find(|e| !e.score.is_finite() || e.score < 0.0)
        {
            return Err(Error::NonFinite(format!(
                "score {} for {} window {}",
                e.score, e.scan_id, e.window_index
            )));
        }
        entries.sort_by(|a, b| (&a.scan_id, a.window_index).cmp(&(&b.scan_id, b.window_index)));
        let mut scans: Vec<ScanScore> = Vec::new();
        for group in entries.chunk_by(|a, b| a.scan_id == b.scan_id) {
            let first = &group[0];
            if let Some(e) = group
                .iter()
                .find(|e| e.subject_id != first.subject_id || e.label != first.label)
            {
                return Err(Error::Format {
                    path: Default::default(),
                    reason: format!(
                        "scan {} has inconsistent subject or label ({})",
                        first.scan_id, e.subject_id
                    ),
                });
            }
            let scores = group.iter().map(|e| e.score);
            scans.push(ScanScore {
                subject_id: first.subject_id.clone(),
                scan_id: first.scan_id.clone(),
                label: first.label,
                windows: group.len(),
                mean: scores.clone().sum::<f64>() / group.len() as f64,
                max: scores.clone().fold(f64::NEG_INFINITY, f64::max),
                min: scores.fold(f64::INFINITY, f64::min),
            });
        }
        Ok(ScoreTable {
            metric,
            entries,
            scans,
        })
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn scans(&self) -> &[ScanScore] {
        &self.scans
    }

    pub fn scan(&self, scan_id: &str) -> Option<&ScanScore> {
        self.scans.iter().find(|s| s.scan_id == scan_id)
    }

    /// Scan ids per subject.
    pub fn subjects(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for s in &self.scans {
            map.entry(s.subject_id.as_str())
                .or_default()
                .push(s.scan_id.as_str());
        }
        map
    }

    /// Mean of each subject's per-scan means.
    pub fn subject_means(&self) -> BTreeMap<&str, f64> {
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for s in &self.scans {
            let e = acc.entry(s.subject_id.as_str()).or_default();
            e.0 += s.mean;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["subject_id", "scan_id", "window_index", "score", "label"])?;
        for e in &self.entries {
            // `{}` on f64 is the shortest representation that parses back exactly.
            csv.write_record([
                e.subject_id.clone(),
                e.scan_id.clone(),
                e.window_index.to_string(),
                format!("{}", e.score),
                e.label.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn read_csv(metric: DistanceMetric, r: impl Read) -> Result<Self> {
        let mut csv = csv::Reader::from_reader(r);
        let mut entries = Vec::new();
        for row in csv.deserialize() {
            let row: CsvRow = row?;
            entries.push(ScoreEntry {
                subject_id: row.subject_id,
                scan_id: row.scan_id,
                window_index: row.window_index,
                score: row.score,
                label: row
                    .label
                    .as_deref()
                    .map(str::parse)
                    .transpose()?
                    .unwrap_or(Label::Unknown),
            });
        }
        ScoreTable::new(metric, entries)
    }

    /// SHA-256 of the CSV form; identifies the table in threshold records.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            format!("{}\n{}", self.metric, self.to_csv()).as_bytes(),
        ))
    }

    pub fn summary(&self) -> TableSummary {
        TableSummary {
            metric: self.metric,
            scans: self.scans.len(),
            windows: self.entries.len(),
            hash: self.hash(),
            per_scan: self.scans.clone(),
        }
    }
}

#[derive(Deserialize)]
struct CsvRow {
    subject_id: String,
    scan_id: String,
    window_index: usize,
    score: f64,
    label: Option<String>,
}

/// JSON summary of a score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub metric: DistanceMetric,
    pub scans: usize,
    pub windows: usize,
    pub hash: String,
    pub per_scan: Vec<ScanScore>,
}

/// Scores every window with `model` and groups them by scan.
pub fn build_score_table(
    model: &impl Reconstruct,
    windows: &[WindowPair],
    metric: DistanceMetric,
) -> Result<ScoreTable> {
    if windows.is_empty() {
        return Err(Error::EmptyData("no windows to score".into()));
    }
    let scores = window_scores(model, windows, metric)?;
    let entries = windows
        .iter()
        .zip(scores)
        .map(|(w, score)| ScoreEntry {
            subject_id: w.subject_id.clone(),
            scan_id: w.scan_id.clone(),
            window_index: w.window_index,
            score,
            label: w.label,
        })
        .collect();
    ScoreTable::new(metric, entries)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ThresholdKind {
    /// Mean over units of each unit's mean window score.
    #[default]
    Avg,
    /// Largest window score.
    Max,
    /// Smallest window score.
    Min,
}

impl ThresholdKind {
    pub const ALL: [ThresholdKind; 3] =
        [ThresholdKind::Avg, ThresholdKind::Max, ThresholdKind::Min];
}

impl fmt::Display for ThresholdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdKind::Avg => "AVG",
            ThresholdKind::Max => "MAX",
            ThresholdKind::Min => "MIN",
        })
    }
}

impl FromStr for ThresholdKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "avg" | "mean" => Ok(ThresholdKind::Avg),
            "max" => Ok(ThresholdKind::Max),
            "min" => Ok(ThresholdKind::Min),
            _ => Err(Error::Config(format!("unknown threshold kind `{s}`"))),
        }
    }
}

/// What the threshold averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ThresholdUnit {
    #[default]
    Scan,
    /// A subject's value is the mean of its scans' means.
    Subject,
}

/// Decision at `score == threshold`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TieRule {
    #[default]
    Inlier,
    Outlier,
}

/// Choices for ties and for how the threshold is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoringPolicy {
    pub tie: TieRule,
    pub unit: ThresholdUnit,
}

impl ScoringPolicy {
    /// Ties count as outliers and thresholds average over subjects.
    pub fn strict() -> Self {
        ScoringPolicy {
            tie: TieRule::Outlier,
            unit: ThresholdUnit::Subject,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub kind: ThresholdKind,
    pub unit: ThresholdUnit,
    pub value: f64,
    pub metric: DistanceMetric,
    /// Hash of the training table the value came from.
    pub provenance: String,
}

/// Threshold of `kind` over a (training) score table.
pub fn compute_threshold(table: &ScoreTable, kind: ThresholdKind) -> Result<Threshold> {
    compute_threshold_with(table, kind, ThresholdUnit::Scan)
}

pub fn compute_threshold_with(
    table: &ScoreTable,
    kind: ThresholdKind,
    unit: ThresholdUnit,
) -> Result<Threshold> {
    let scans = table.scans();
    if scans.is_empty() {
        return Err(Error::EmptyData("threshold over an empty table".into()));
    }
    let value = match kind {
        ThresholdKind::Avg => match unit {
            ThresholdUnit::Scan => scans.iter().map(|s| s.mean).sum::<f64>() / scans.len() as f64,
            ThresholdUnit::Subject => {
                let means = table.subject_means();
                means.values().sum::<f64>() / means.len() as f64
            }
        },
        ThresholdKind::Max => scans
            .iter()
            .map(|s| s.max)
            .fold(f64::NEG_INFINITY, f64::max),
        ThresholdKind::Min => scans.iter().map(|s| s.min).fold(f64::INFINITY, f64::min),
    };
    Ok(Threshold {
        kind,
        unit,
        value,
        metric: table.metric,
        provenance: table.hash(),
    })
}

/// Outliers are the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Inlier,
    Outlier,
}

impl Decision {
    /// Ground-truth decision for a label; unlabelled scans have none.
    pub fn from_label(label: Label) -> Option<Decision> {
        match label {
            Label::Healthy => Some(Decision::Inlier),
            Label::Anomalous => Some(Decision::Outlier),
            Label::Unknown => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Inlier => "INLIER",
            Decision::Outlier => "OUTLIER",
        })
    }
}

/// Compares a score with a threshold value.
pub fn decide(score: f64, threshold: f64, tie: TieRule) -> Result<Decision> {
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("scan score {score}")));
    }
    Ok(
        if score > threshold || (score == threshold && tie == TieRule::Outlier) {
            Decision::Outlier
        } else {
            Decision::Inlier
        },
    )
}

/// Scan decision with the default tie rule (ties are inliers).
pub fn classify_scan(scan_mean: f64, threshold: &Threshold) -> Result<Decision> {
    decide(scan_mean, threshold.value, TieRule::Inlier)
}

pub fn classify_scan_with(scan_mean: f64, threshold: &Threshold, tie: TieRule) -> Result<Decision> {
    decide(scan_mean, threshold.value, tie)
}

#[cfg(test)]
mod tests;
