//! Confusion-matrix metrics, fold aggregation and the three-block evaluation
//! report (binary diagnosis, per-pattern detection, clinical explanation
//! groups).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DiagnosisGroup, Pattern, PatternVector};
use crate::rules::group_of;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("prediction and truth lengths differ ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no samples to evaluate")]
    EmptyCounts,
    #[error("no folds to aggregate")]
    NoFolds,
    #[error("{0} is undefined in every fold")]
    AllUndefined(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyCounts);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        c.record(p, t);
    }
    Ok(c)
}

/// A ratio that may be undefined because its denominator is zero.
/// Serializes as a number or the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    pub fn ratio(num: u64, den: u64) -> Metric {
        if den == 0 {
            Metric::Undefined
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Metric::Value(_))
    }
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Metric::Value(v)),
            Repr::Str(s) if s == "undefined" => Ok(Metric::Undefined),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub recall: Metric,
    pub specificity: Metric,
    pub precision: Metric,
    pub accuracy: Metric,
}

pub const METRIC_NAMES: [&str; 4] = ["recall", "specificity", "precision", "accuracy"];

impl MetricSet {
    /// Metric by position in [`METRIC_NAMES`].
    pub fn get(&self, i: usize) -> Metric {
        [self.recall, self.specificity, self.precision, self.accuracy][i]
    }
}

pub fn metrics_of(c: &ConfusionCounts) -> Result<MetricSet, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    Ok(MetricSet {
        recall: Metric::ratio(c.tp, c.tp + c.fn_),
        specificity: Metric::ratio(c.tn, c.tn + c.fp),
        precision: Metric::ratio(c.tp, c.tp + c.fp),
        accuracy: Metric::ratio(c.tp + c.tn, c.total()),
    })
}

/// Mean and population variance over the folds where a metric is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Metric,
    pub variance: Metric,
    pub folds_used: usize,
    pub excluded: usize,
}

impl Aggregate {
    fn undefined(excluded: usize) -> Self {
        Aggregate {
            mean: Metric::Undefined,
            variance: Metric::Undefined,
            folds_used: 0,
            excluded,
        }
    }
}

/// Aggregates one metric across folds, skipping undefined entries.
pub fn aggregate_metric(values: &[Metric], name: &'static str) -> Result<Aggregate, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::NoFolds);
    }
    let defined: Vec<f64> = values.iter().filter_map(|m| m.value()).collect();
    if defined.is_empty() {
        return Err(MetricsError::AllUndefined(name));
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let variance = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Aggregate {
        mean: Metric::Value(mean),
        variance: Metric::Value(variance),
        folds_used: defined.len(),
        excluded: values.len() - defined.len(),
    })
}

fn aggregate_or_undefined(values: &[Metric], name: &'static str) -> Aggregate {
    aggregate_metric(values, name).unwrap_or_else(|_| Aggregate::undefined(values.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateSet {
    pub recall: Aggregate,
    pub specificity: Aggregate,
    pub precision: Aggregate,
    pub accuracy: Aggregate,
}

impl AggregateSet {
    fn from_fn(mut f: impl FnMut(usize) -> Aggregate) -> Self {
        AggregateSet {
            recall: f(0),
            specificity: f(1),
            precision: f(2),
            accuracy: f(3),
        }
    }
}

pub fn fold_aggregate(per_fold: &[MetricSet]) -> Result<AggregateSet, MetricsError> {
    let mut out = Vec::with_capacity(4);
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        let values: Vec<Metric> = per_fold.iter().map(|m| m.get(i)).collect();
        out.push(aggregate_metric(&values, name)?);
    }
    Ok(AggregateSet::from_fn(|i| out[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: DiagnosisGroup,
    /// Samples whose reference falls in this group.
    pub support: u64,
    pub correct: u64,
    pub accuracy: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XaiEval {
    pub groups: [GroupAccuracy; 3],
    /// One-vs-rest confusion per group, in [`DiagnosisGroup::ALL`] order.
    pub one_vs_rest: [ConfusionCounts; 3],
    /// Binary task "some BCC-positive pattern present".
    pub bcc_pattern_detection: ConfusionCounts,
}

impl XaiEval {
    pub fn group(&self, g: DiagnosisGroup) -> &GroupAccuracy {
        &self.groups[g as usize]
    }
}

pub fn xai_group_eval(
    pred: &[PatternVector],
    sr: &[PatternVector],
) -> Result<XaiEval, MetricsError> {
    if pred.len() != sr.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: sr.len(),
        });
    }
    let mut support = [0u64; 3];
    let mut correct = [0u64; 3];
    let mut one_vs_rest = [ConfusionCounts::default(); 3];
    for (p, t) in pred.iter().zip(sr) {
        let (gp, gt) = (group_of(p), group_of(t));
        support[gt as usize] += 1;
        if gp == gt {
            correct[gt as usize] += 1;
        }
        for g in DiagnosisGroup::ALL {
            one_vs_rest[g as usize].record(gp == g, gt == g);
        }
    }
    let groups = DiagnosisGroup::ALL.map(|g| {
        let i = g as usize;
        GroupAccuracy {
            group: g,
            support: support[i],
            correct: correct[i],
            accuracy: Metric::ratio(correct[i], support[i]),
        }
    });
    Ok(XaiEval {
        groups,
        one_vs_rest,
        bcc_pattern_detection: one_vs_rest[DiagnosisGroup::BccPattern as usize],
    })
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub image_id: String,
    pub fold: usize,
    pub pred: PatternVector,
    pub pred_bcc: bool,
    pub truth: PatternVector,
    pub truth_bcc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub counts: ConfusionCounts,
    pub metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub name: String,
    pub pooled: ConfusionCounts,
    pub folds: Vec<FoldEntry>,
    pub aggregate: AggregateSet,
}

impl TargetReport {
    fn build(name: &str, folds: &[usize], per_fold: Vec<ConfusionCounts>) -> Self {
        let mut pooled = ConfusionCounts::default();
        let entries: Vec<FoldEntry> = folds
            .iter()
            .zip(per_fold)
            .map(|(&fold, counts)| {
                pooled.merge(&counts);
                FoldEntry {
                    fold,
                    counts,
                    metrics: metrics_of(&counts).ok(),
                }
            })
            .collect();
        let aggregate = AggregateSet::from_fn(|i| {
            let values: Vec<Metric> = entries
                .iter()
                .map(|e| e.metrics.map_or(Metric::Undefined, |m| m.get(i)))
                .collect();
            aggregate_or_undefined(&values, METRIC_NAMES[i])
        });
        TargetReport {
            name: name.to_string(),
            pooled,
            folds: entries,
            aggregate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFold {
    pub fold: usize,
    pub support: u64,
    pub correct: u64,
    pub accuracy: Metric,
}

/// One row of the clinical-explanation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub name: String,
    pub group: DiagnosisGroup,
    pub folds: Vec<GroupFold>,
    /// Fraction of reference samples in the group labelled with the group.
    pub accuracy: Aggregate,
    /// One-vs-rest binary metrics; absent for the no-pattern row.
    pub detection: Option<TargetReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub folds: Vec<usize>,
    pub variance: String,
    pub binary: TargetReport,
    pub patterns: Vec<TargetReport>,
    pub xai: Vec<GroupRow>,
}

pub fn build_report(samples: &[EvalSample]) -> Result<MetricsReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyCounts);
    }
    let folds: Vec<usize> = samples
        .iter()
        .map(|s| s.fold)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let in_fold = |f: usize| samples.iter().filter(move |s| s.fold == f);

    let binary = TargetReport::build(
        "BCC/Non-BCC",
        &folds,
        folds
            .iter()
            .map(|&f| {
                let mut c = ConfusionCounts::default();
                in_fold(f).for_each(|s| c.record(s.pred_bcc, s.truth_bcc));
                c
            })
            .collect(),
    );

    let patterns = Pattern::ALL
        .iter()
        .map(|&p| {
            let per_fold = folds
                .iter()
                .map(|&f| {
                    let mut c = ConfusionCounts::default();
                    in_fold(f).for_each(|s| c.record(s.pred.get(p), s.truth.get(p)));
                    c
                })
                .collect();
            TargetReport::build(p.display_name(), &folds, per_fold)
        })
        .collect();

    let per_fold_xai: Vec<XaiEval> = folds
        .iter()
        .map(|&f| {
            let (pred, truth): (Vec<_>, Vec<_>) = in_fold(f).map(|s| (s.pred, s.truth)).unzip();
            xai_group_eval(&pred, &truth)
        })
        .collect::<Result<_, _>>()?;

    let xai = DiagnosisGroup::ALL
        .iter()
        .map(|&g| {
            let group_folds: Vec<GroupFold> = folds
                .iter()
                .zip(&per_fold_xai)
                .map(|(&fold, x)| {
                    let ga = x.group(g);
                    GroupFold {
                        fold,
                        support: ga.support,
                        correct: ga.correct,
                        accuracy: ga.accuracy,
                    }
                })
                .collect();
            let accs: Vec<Metric> = group_folds.iter().map(|f| f.accuracy).collect();
            let detection = (g != DiagnosisGroup::NoPattern).then(|| {
                TargetReport::build(
                    g.row_label(),
                    &folds,
                    per_fold_xai.iter().map(|x| x.one_vs_rest[g as usize]).collect(),
                )
            });
            GroupRow {
                name: g.row_label().to_string(),
                group: g,
                folds: group_folds,
                accuracy: aggregate_or_undefined(&accs, "accuracy"),
                detection,
            }
        })
        .collect();

    Ok(MetricsReport {
        n_samples: samples.len(),
        folds,
        variance: "population".to_string(),
        binary,
        patterns,
        xai,
    })
}

fn fmt_cell(a: &Aggregate) -> String {
    match (a.mean, a.variance) {
        (Metric::Value(m), Metric::Value(v)) => format!("{m:.2} ({v:.2e})"),
        _ => "undefined".to_string(),
    }
}

fn target_row(out: &mut String, label: &str, agg: &AggregateSet) {
    let _ = writeln!(
        out,
        "| {label} | {} | {} | {} | {} |",
        fmt_cell(&agg.recall),
        fmt_cell(&agg.specificity),
        fmt_cell(&agg.precision),
        fmt_cell(&agg.accuracy)
    );
}

impl MetricsReport {
    /// Markdown table with the binary, pattern and explanation blocks. Cells
    /// read `mean (variance)` over folds. In the explanation block the
    /// accuracy column is the per-group accuracy.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "| | Recall (σ²) | Specificity (σ²) | Precision (σ²) | Accuracy (σ²) |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|");
        let _ = writeln!(out, "| **BCC/Non-BCC** | | | | |");
        target_row(&mut out, "BCC/Non-BCC", &self.binary.aggregate);
        let _ = writeln!(out, "| **Pattern detection** | | | | |");
        for t in &self.patterns {
            target_row(&mut out, &t.name, &t.aggregate);
        }
        let _ = writeln!(out, "| **Clinically-inspired XAI** | | | | |");
        for row in &self.xai {
            match &row.detection {
                None => {
                    let _ = writeln!(out, "| {} | - | - | - | {} |", row.name, fmt_cell(&row.accuracy));
                }
                Some(d) => {
                    let _ = writeln!(
                        out,
                        "| {} | {} | {} | {} | {} |",
                        row.name,
                        fmt_cell(&d.aggregate.recall),
                        fmt_cell(&d.aggregate.specificity),
                        fmt_cell(&d.aggregate.precision),
                        fmt_cell(&row.accuracy)
                    );
                }
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{} samples, {} fold(s); σ² is the population variance across folds.",
            self.n_samples,
            self.folds.len()
        );
        out
    }
}
