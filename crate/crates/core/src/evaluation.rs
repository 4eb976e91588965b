//! Confusion matrices, accuracy, ROC/AUC, PSNR, plane fusion and reports.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Label, Plane, SliceStack};
use crate::error::{Error, Result};
use crate::scoring::{
    compute_threshold_with, decide, Decision, DistanceMetric, ScoreTable, ScoringPolicy, Threshold,
    ThresholdKind,
};

pub const REPORT_VERSION: &str = "reconscan-eval/1";

/// Peak value for PSNR on min-max normalized data.
pub const PSNR_PEAK: f64 = 1.0;

/// 2x2 contingency counts with OUTLIER as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Percentage of correct decisions.
    pub fn accuracy(&self) -> Result<f64> {
        accuracy(self)
    }
}

/// Counts `(predicted, truth)` pairs.
pub fn confusion(decisions: &[(Decision, Decision)]) -> Result<ConfusionMatrix> {
    if decisions.is_empty() {
        return Err(Error::EmptyData("no decisions to count".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for &(pred, truth) in decisions {
        match (pred, truth) {
            (Decision::Outlier, Decision::Outlier) => cm.tp += 1,
            (Decision::Inlier, Decision::Inlier) => cm.tn += 1,
            (Decision::Outlier, Decision::Inlier) => cm.fp += 1,
            (Decision::Inlier, Decision::Outlier) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::EmptyData(
            "accuracy of an empty confusion matrix".into(),
        ));
    }
    Ok(100.0 * (cm.tp + cm.tn) as f64 / cm.total() as f64)
}

/// Two-decimal display that truncates rather than rounds (40/46 shows as
/// 86.95). The small slack absorbs binary representation error.
pub fn format_percent(pct: f64) -> String {
    format!("{:.2}", (pct * 100.0 + 1e-7).floor() / 100.0)
}

/// Threshold-sweep ROC curve, highest scores flagged first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(false positive rate, true positive rate)` from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl Roc {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["fpr", "tpr"])?;
        for (x, y) in &self.points {
            csv.write_record([x.to_string(), y.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// ROC curve and trapezoidal AUC for `(score, is_positive)` pairs. Tied
/// scores form one diagonal step, so the AUC equals the Mann-Whitney
/// statistic with ties counted as one half. The area is accumulated in
/// integers and divided once.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<Roc> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("ROC score {s}")));
    }
    let positives = scores.iter().filter(|(_, p)| *p).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut twice_area: u128 = 0;
    let mut points = vec![(0.0, 0.0)];
    for group in sorted.chunk_by(|a, b| a.0 == b.0) {
        let p = group.iter().filter(|(_, pos)| *pos).count();
        let n = group.len() - p;
        twice_area += (n as u128) * (2 * tp as u128 + p as u128);
        tp += p;
        fp += n;
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    let auc = twice_area as f64 / (2 * positives as u128 * negatives as u128) as f64;
    Ok(Roc {
        points,
        auc,
        positives,
        negatives,
    })
}

/// PSNR in dB between two stacks; `f64::INFINITY` when they are identical.
pub fn psnr(x: &SliceStack, y: &SliceStack) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "PSNR of {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    psnr_values(x.values(), y.values())
}

pub fn psnr_values(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "PSNR of {} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptyData("PSNR of empty stacks".into()));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FusionRule {
    /// Mean of `score / threshold` over planes, outlier above 1.
    #[default]
    MeanNormalized,
    /// Outlier if any plane says outlier; the fused score is the largest
    /// normalized score.
    Any,
}

impl FusionRule {
    pub const ALL: [FusionRule; 2] = [FusionRule::MeanNormalized, FusionRule::Any];
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionRule::MeanNormalized => "MEAN_NORMALIZED",
            FusionRule::Any => "ANY",
        })
    }
}

impl FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "mean_normalized" | "mean" => Ok(FusionRule::MeanNormalized),
            "any" => Ok(FusionRule::Any),
            _ => Err(Error::Config(format!("unknown fusion rule `{s}`"))),
        }
    }
}

/// One plane's scan score and threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneScore {
    pub score: f64,
    pub threshold: f64,
}

impl PlaneScore {
    fn normalized(&self) -> Result<f64> {
        let v = self.score / self.threshold;
        if !v.is_finite() || self.threshold <= 0.0 {
            return Err(Error::NonFinite(format!(
                "normalized score {} / {}",
                self.score, self.threshold
            )));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fused {
    pub score: f64,
    pub decision: Decision,
}

/// Combines the decisions for `planes` of one scan.
pub fn fuse_planes(
    per_plane: &BTreeMap<Plane, PlaneScore>,
    planes: &[Plane],
    rule: FusionRule,
    policy: &ScoringPolicy,
) -> Result<Fused> {
    if planes.is_empty() {
        return Err(Error::EmptyData("fusion over no planes".into()));
    }
    let mut normalized = Vec::with_capacity(planes.len());
    let mut any = false;
    for p in planes {
        let ps = per_plane
            .get(p)
            .ok_or_else(|| Error::MissingPlane(p.to_string()))?;
        normalized.push(ps.normalized()?);
        any |= decide(ps.score, ps.threshold, policy.tie)? == Decision::Outlier;
    }
    let fused = match rule {
        FusionRule::MeanNormalized => {
            let score = normalized.iter().sum::<f64>() / normalized.len() as f64;
            Fused {
                score,
                decision: decide(score, 1.0, policy.tie)?,
            }
        }
        FusionRule::Any => Fused {
            score: normalized.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            decision: if any {
                Decision::Outlier
            } else {
                Decision::Inlier
            },
        },
    };
    Ok(fused)
}

/// Per-scan line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub subject_id: String,
    pub scan_id: String,
    pub label: Label,
    pub score: f64,
    pub decision: Decision,
}

/// Detection results for one plane or one fusion rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub accuracy_display: String,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub scans: Vec<ScanResult>,
}

impl DetectionReport {
    fn from_scans(scans: Vec<ScanResult>) -> Result<Self> {
        let mut pairs = Vec::with_capacity(scans.len());
        let mut scored = Vec::with_capacity(scans.len());
        for s in &scans {
            let truth = Decision::from_label(s.label).ok_or_else(|| {
                Error::Config(format!("scan {} has no ground-truth label", s.scan_id))
            })?;
            pairs.push((s.decision, truth));
            scored.push((s.score, truth == Decision::Outlier));
        }
        let cm = confusion(&pairs)?;
        let roc = roc_auc(&scored)?;
        let acc = accuracy(&cm)?;
        Ok(DetectionReport {
            confusion: cm,
            accuracy: acc,
            accuracy_display: format_percent(acc),
            auc: roc.auc,
            roc: roc.points,
            scans,
        })
    }

    pub fn roc(&self) -> Roc {
        Roc {
            points: self.roc.clone(),
            auc: self.auc,
            positives: self.confusion.tp + self.confusion.fn_,
            negatives: self.confusion.tn + self.confusion.fp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneReport {
    pub plane: Plane,
    pub threshold: Threshold,
    #[serde(flatten)]
    pub detection: DetectionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub rule: FusionRule,
    pub planes: Vec<Plane>,
    #[serde(flatten)]
    pub detection: DetectionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub metric: DistanceMetric,
    pub threshold_kind: ThresholdKind,
    pub policy: ScoringPolicy,
    pub psnr_peak: f64,
    pub planes: Vec<PlaneReport>,
    /// One entry per fusion rule when more than one plane is evaluated.
    pub fusion: Vec<FusionReport>,
}

/// Training and test score tables of one plane.
#[derive(Clone, Copy, Debug)]
pub struct PlaneTables<'a> {
    pub plane: Plane,
    pub train: &'a ScoreTable,
    pub test: &'a ScoreTable,
}

/// Thresholds each plane on its training table and classifies its test scans.
pub fn evaluate_plane(
    tables: &PlaneTables<'_>,
    kind: ThresholdKind,
    policy: &ScoringPolicy,
) -> Result<PlaneReport> {
    if tables.train.metric != tables.test.metric {
        return Err(Error::Config(format!(
            "train scores use {}, test scores use {}",
            tables.train.metric, tables.test.metric
        )));
    }
    let threshold = compute_threshold_with(tables.train, kind, policy.unit)?;
    let scans = tables
        .test
        .scans()
        .iter()
        .map(|s| {
            Ok(ScanResult {
                subject_id: s.subject_id.clone(),
                scan_id: s.scan_id.clone(),
                label: s.label,
                score: s.mean,
                decision: decide(s.mean, threshold.value, policy.tie)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PlaneReport {
        plane: tables.plane,
        threshold,
        detection: DetectionReport::from_scans(scans)?,
    })
}

/// Evaluates every plane and, with several planes, every fusion rule.
pub fn evaluate(
    planes: &[PlaneTables<'_>],
    kind: ThresholdKind,
    policy: &ScoringPolicy,
) -> Result<EvalReport> {
    let Some(first) = planes.first() else {
        return Err(Error::EmptyData("no planes to evaluate".into()));
    };
    let reports = planes
        .iter()
        .map(|t| evaluate_plane(t, kind, policy))
        .collect::<Result<Vec<_>>>()?;
    let mut fusion = Vec::new();
    if planes.len() > 1 {
        let names: Vec<Plane> = reports.iter().map(|r| r.plane).collect();
        let mut per_scan: BTreeMap<&str, BTreeMap<Plane, PlaneScore>> = BTreeMap::new();
        for r in &reports {
            for s in &r.detection.scans {
                per_scan.entry(s.scan_id.as_str()).or_default().insert(
                    r.plane,
                    PlaneScore {
                        score: s.score,
                        threshold: r.threshold.value,
                    },
                );
            }
        }
        let reference = &reports[0].detection.scans;
        for rule in FusionRule::ALL {
            let scans = reference
                .iter()
                .map(|s| {
                    let fused = fuse_planes(&per_scan[s.scan_id.as_str()], &names, rule, policy)?;
                    Ok(ScanResult {
                        subject_id: s.subject_id.clone(),
                        scan_id: s.scan_id.clone(),
                        label: s.label,
                        score: fused.score,
                        decision: fused.decision,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            fusion.push(FusionReport {
                rule,
                planes: names.clone(),
                detection: DetectionReport::from_scans(scans)?,
            });
        }
        // Scans present in a later plane but not in the first one.
        if let Some(extra) = per_scan.iter().find(|(_, m)| m.len() != names.len()) {
            let missing = names
                .iter()
                .find(|p| !extra.1.contains_key(p))
                .expect("a plane is missing");
            return Err(Error::MissingPlane(format!("{missing} (scan {})", extra.0)));
        }
    }
    Ok(EvalReport {
        version: REPORT_VERSION.into(),
        metric: first.test.metric,
        threshold_kind: kind,
        policy: *policy,
        psnr_peak: PSNR_PEAK,
        planes: reports,
        fusion,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Accuracy, AUC and confusion tables in plain text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Distance: {}   threshold: tau_{}",
            self.metric,
            self.threshold_kind.to_string().to_lowercase()
        );
        let _ = writeln!(
            out,
            "PSNR peak: {:.1} (normalized intensities)",
            self.psnr_peak
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<28} {:>10} {:>6} {:>5} {:>5} {:>5} {:>5} {:>10}",
            "Planes", "Accuracy", "AUC", "TP", "TN", "FP", "FN", "Threshold"
        );
        for r in &self.planes {
            row(
                &mut out,
                &r.plane.to_string(),
                &r.detection,
                Some(r.threshold.value),
            );
        }
        for f in &self.fusion {
            let names: Vec<String> = f.planes.iter().map(|p| p.to_string()).collect();
            row(
                &mut out,
                &format!("{} [{}]", names.join("+"), f.rule),
                &f.detection,
                None,
            );
        }
        out
    }
}

fn row(out: &mut String, name: &str, d: &DetectionReport, threshold: Option<f64>) {
    let cm = &d.confusion;
    let th = threshold
        .map(|t| format!("{t:.6}"))
        .unwrap_or_else(|| "-".into());
    let _ = writeln!(
        out,
        "{:<28} {:>9}% {:>6.2} {:>5} {:>5} {:>5} {:>5} {:>10}",
        name, d.accuracy_display, d.auc, cm.tp, cm.tn, cm.fp, cm.fn_, th
    );
}
