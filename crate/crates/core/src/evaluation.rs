//! Threshold-free and thresholded metrics, model selection over a training
//! log, and the labelling-savings arithmetic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryLabel, FaultClass, ModuleId};
use crate::error::{Error, Result};
use crate::index::{aggregate_modules, ModuleVerdict, Prediction};

pub const DEFAULT_SECONDS_PER_MODULE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: BinaryLabel,
    pub fault_class: Option<FaultClass>,
    pub module_id: ModuleId,
}

impl ScoredSample {
    pub fn new(score: f64, anomalous: bool) -> Self {
        ScoredSample {
            score,
            label: if anomalous { BinaryLabel::Anomalous } else { BinaryLabel::Normal },
            fault_class: None,
            module_id: ModuleId(0),
        }
    }

    fn positive(&self) -> bool {
        self.label.is_anomalous()
    }
}

/// Scored samples from labelled predictions.
pub fn scored_samples(predictions: &[Prediction]) -> Result<Vec<ScoredSample>> {
    predictions
        .iter()
        .map(|p| {
            let label = p.binary_label.ok_or(Error::UndefinedMetric {
                metric: "evaluation",
                reason: format!("prediction for image {} carries no ground-truth label", p.image_id),
            })?;
            if !p.score.is_finite() {
                return Err(Error::NonFinite("prediction score"));
            }
            Ok(ScoredSample { score: p.score, label, fault_class: p.fault_class, module_id: p.module_id })
        })
        .collect()
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.fp + self.tn)
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.tp + self.fn_)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        self.tpr()
    }

    fn tally(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

/// Verdict `score > delta` against the true label.
pub fn confusion(samples: &[ScoredSample], delta: f64) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for s in samples {
        m.tally(s.score > delta, s.positive());
    }
    m
}

/// Module verdicts against module ground truth; unlabelled modules are skipped.
pub fn module_confusion(modules: &[ModuleVerdict]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for v in modules {
        if let Some(truth) = v.binary_label {
            m.tally(v.verdict.is_anomalous(), truth.is_anomalous());
        }
    }
    m
}

/// Cumulative (tp, fp) after each distinct threshold, scores descending.
fn threshold_steps(samples: &[ScoredSample]) -> Vec<(u64, u64)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (i, s) in sorted.iter().enumerate() {
        if s.positive() {
            tp += 1;
        } else {
            fp += 1;
        }
        if sorted.get(i + 1).is_none_or(|next| next.score != s.score) {
            steps.push((tp, fp));
        }
    }
    steps
}

fn class_counts(samples: &[ScoredSample]) -> (u64, u64) {
    let p = samples.iter().filter(|s| s.positive()).count() as u64;
    (p, samples.len() as u64 - p)
}

fn require_both(samples: &[ScoredSample], metric: &'static str) -> Result<(u64, u64)> {
    let (p, n) = class_counts(samples);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric {
            metric,
            reason: format!("needs both classes, got {p} anomalous and {n} normal samples"),
        });
    }
    Ok((p, n))
}

/// Area under the ROC curve by trapezoids over distinct thresholds.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (p, n) = require_both(samples, "AUROC")?;
    // twice the area in units of one (1/P × 1/N) cell; exact in integers
    let mut doubled: u128 = 0;
    let (mut tp0, mut fp0) = (0u64, 0u64);
    for (tp, fp) in threshold_steps(samples) {
        doubled += u128::from(fp - fp0) * u128::from(tp + tp0);
        tp0 = tp;
        fp0 = fp;
    }
    Ok(doubled as f64 / (2.0 * p as f64 * n as f64))
}

/// ROC points (FPR, TPR) from (0, 0) to (1, 1).
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<[f64; 2]>> {
    let (p, n) = require_both(samples, "ROC curve")?;
    let mut points = vec![[0.0, 0.0]];
    points.extend(threshold_steps(samples).into_iter().map(|(tp, fp)| [fp as f64 / n as f64, tp as f64 / p as f64]));
    Ok(points)
}

/// Σ (R_i − R_{i−1}) P_i over distinct thresholds, tied scores entering together.
///
/// Accumulated as Σ ΔTP_i · P_i and divided by the positive count once, so
/// the result never exceeds 1.
pub fn average_precision(samples: &[ScoredSample]) -> Result<f64> {
    let (p, _) = class_counts(samples);
    if p == 0 {
        return Err(Error::UndefinedMetric { metric: "AP", reason: "no anomalous samples".to_string() });
    }
    let mut weighted = 0.0;
    let mut tp0 = 0;
    for (tp, fp) in threshold_steps(samples) {
        weighted += ap_term(tp - tp0, tp, fp);
        tp0 = tp;
    }
    Ok(weighted / p as f64)
}

/// Recall increment (in samples) times precision at one threshold.
fn ap_term(new_tp: u64, tp: u64, fp: u64) -> f64 {
    if new_tp == 0 {
        return 0.0;
    }
    new_tp as f64 * (tp as f64 / (tp + fp) as f64)
}

/// Precision–recall points (recall, precision), one per distinct threshold.
pub fn pr_curve(samples: &[ScoredSample]) -> Result<Vec<[f64; 2]>> {
    let (p, _) = class_counts(samples);
    if p == 0 {
        return Err(Error::UndefinedMetric { metric: "PR curve", reason: "no anomalous samples".to_string() });
    }
    Ok(threshold_steps(samples)
        .into_iter()
        .map(|(tp, fp)| [tp as f64 / p as f64, tp as f64 / (tp + fp) as f64])
        .collect())
}

/// √(TPR · (1 − FPR)).
pub fn g_mean(samples: &[ScoredSample], delta: f64) -> Result<f64> {
    require_both(samples, "G-Mean")?;
    let m = confusion(samples, delta);
    Ok((m.tpr().unwrap() * m.tnr().unwrap()).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultErrorRow {
    pub count: u64,
    pub missed: u64,
    /// Percentage of the class predicted normal; `None` when the class is absent.
    pub percent_missed: Option<f64>,
}

impl FaultErrorRow {
    pub fn display(&self) -> String {
        match self.percent_missed {
            Some(p) => format!("{p:.1}"),
            None => "--".to_string(),
        }
    }
}

/// Per fault class: share of its anomalous samples classified normal at `delta`.
pub fn per_fault_errors(samples: &[ScoredSample], delta: f64) -> BTreeMap<FaultClass, FaultErrorRow> {
    let mut table: BTreeMap<FaultClass, (u64, u64)> = FaultClass::ALL.iter().map(|&c| (c, (0, 0))).collect();
    for s in samples {
        if let (true, Some(class)) = (s.positive(), s.fault_class) {
            let entry = table.get_mut(&class).unwrap();
            entry.0 += 1;
            if s.score <= delta {
                entry.1 += 1;
            }
        }
    }
    table
        .into_iter()
        .map(|(c, (count, missed))| {
            let percent_missed = (count > 0).then(|| 100.0 * missed as f64 / count as f64);
            (c, FaultErrorRow { count, missed, percent_missed })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    Auroc,
    Ap,
}

impl std::str::FromStr for SelectionCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auroc" => Ok(SelectionCriterion::Auroc),
            "ap" => Ok(SelectionCriterion::Ap),
            other => Err(Error::InvalidConfig(format!("unknown selection criterion {other:?}"))),
        }
    }
}

/// A checkpoint step and the validation metrics measured there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: u64,
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
}

/// Step of the best validation value; ties go to the earliest step.
pub fn select_model(points: &[ValidationPoint], criterion: SelectionCriterion) -> Result<u64> {
    let mut best: Option<(u64, f64)> = None;
    for p in points {
        let value = match criterion {
            SelectionCriterion::Auroc => p.auroc,
            SelectionCriterion::Ap => p.ap,
        };
        if let Some(v) = value {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((p.step, v));
            }
        }
    }
    best.map(|(step, _)| step).ok_or(Error::Empty("validation entries in the training log"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub total_modules: u64,
    pub anomalous_modules: u64,
    pub tnr: f64,
    pub anomaly_recall: f64,
    pub seconds_per_module: f64,
    pub modules_to_review: u64,
    pub lost_anomalies: u64,
    pub review_time_s: f64,
    pub baseline_time_s: f64,
}

pub fn savings_report(
    total_modules: u64,
    anomalous_modules: u64,
    tnr: f64,
    anomaly_recall: f64,
    seconds_per_module: f64,
) -> Result<SavingsReport> {
    for (name, r) in [("TNR", tnr), ("anomaly recall", anomaly_recall)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidConfig(format!("{name} {r} is outside [0, 1]")));
        }
    }
    if anomalous_modules > total_modules {
        return Err(Error::InvalidConfig(format!("{anomalous_modules} anomalous of {total_modules} modules")));
    }
    if !(seconds_per_module >= 0.0) {
        return Err(Error::InvalidConfig("seconds per module must be non-negative".into()));
    }
    let normals = total_modules - anomalous_modules;
    let kept_normals = (normals as f64 * (1.0 - tnr)).round() as u64;
    let found = (anomalous_modules as f64 * anomaly_recall).round() as u64;
    let review = kept_normals + found;
    Ok(SavingsReport {
        total_modules,
        anomalous_modules,
        tnr,
        anomaly_recall,
        seconds_per_module,
        modules_to_review: review,
        lost_anomalies: anomalous_modules - found,
        review_time_s: review as f64 * seconds_per_module,
        baseline_time_s: total_modules as f64 * seconds_per_module,
    })
}

/// Savings from labelled module verdicts.
pub fn module_savings(modules: &[ModuleVerdict], seconds_per_module: f64) -> Result<SavingsReport> {
    let m = module_confusion(modules);
    let anomalous = m.tp + m.fn_;
    savings_report(m.total(), anomalous, m.tnr().unwrap_or(1.0), m.recall().unwrap_or(1.0), seconds_per_module)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
}

impl From<&ConfusionMatrix> for Rates {
    fn from(m: &ConfusionMatrix) -> Self {
        Rates { tpr: m.tpr(), fpr: m.fpr(), tnr: m.tnr(), fnr: m.fnr(), precision: m.precision() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub images: u64,
    pub anomalous_images: u64,
    pub delta: f64,
    pub k: Option<usize>,
    pub auroc: f64,
    pub average_precision: f64,
    pub g_mean: f64,
    pub image_confusion: ConfusionMatrix,
    pub image_rates: Rates,
    pub module_confusion: ConfusionMatrix,
    pub module_rates: Rates,
    pub per_fault: BTreeMap<String, FaultErrorRow>,
    pub roc_curve: Vec<[f64; 2]>,
    pub pr_curve: Vec<[f64; 2]>,
    pub savings: SavingsReport,
}

/// Full report over labelled predictions, re-thresholded at `delta`.
pub fn evaluate(predictions: &[Prediction], delta: f64) -> Result<EvaluationReport> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::ThresholdOutOfRange(delta));
    }
    let samples = scored_samples(predictions)?;
    if samples.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let auroc = auroc(&samples)?;
    let average_precision = average_precision(&samples)?;
    let g_mean = g_mean(&samples, delta)?;
    let image_confusion = confusion(&samples, delta);
    let rethresholded: Vec<Prediction> = predictions.iter().map(|p| p.with_delta(delta)).collect();
    let modules = aggregate_modules(&rethresholded)?;
    let module_confusion = module_confusion(&modules);
    let k = predictions.first().map(|p| p.k).filter(|&k| predictions.iter().all(|p| p.k == k));
    Ok(EvaluationReport {
        images: image_confusion.total(),
        anomalous_images: image_confusion.tp + image_confusion.fn_,
        delta,
        k,
        auroc,
        average_precision,
        g_mean,
        image_rates: Rates::from(&image_confusion),
        image_confusion,
        module_rates: Rates::from(&module_confusion),
        module_confusion,
        per_fault: per_fault_errors(&samples, delta).into_iter().map(|(c, r)| (c.name().to_string(), r)).collect(),
        roc_curve: roc_curve(&samples)?,
        pr_curve: pr_curve(&samples)?,
        savings: module_savings(&modules, DEFAULT_SECONDS_PER_MODULE)?,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or("--".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// Plain-text summary table of a report.
pub fn render_summary(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "images      {} ({} anomalous)", report.images, report.anomalous_images);
    let _ = writeln!(out, "delta       {}", report.delta);
    if let Some(k) = report.k {
        let _ = writeln!(out, "k           {k}");
    }
    let _ = writeln!(out, "AUROC       {:.2}", 100.0 * report.auroc);
    let _ = writeln!(out, "AP          {:.2}", 100.0 * report.average_precision);
    let _ = writeln!(out, "G-Mean      {:.2}", 100.0 * report.g_mean);
    let _ = writeln!(out);
    let _ = writeln!(out, "level    TP      FP      TN      FN      TPR    TNR");
    for (name, m, r) in [
        ("image", &report.image_confusion, &report.image_rates),
        ("module", &report.module_confusion, &report.module_rates),
    ] {
        let _ = writeln!(
            out,
            "{name:<8} {:<7} {:<7} {:<7} {:<7} {:<6} {}",
            m.tp,
            m.fp,
            m.tn,
            m.fn_,
            pct(r.tpr),
            pct(r.tnr)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "missed as normal (%)");
    for (class, row) in &report.per_fault {
        let _ = writeln!(out, "  {class:<5} {:>6}  (n={})", row.display(), row.count);
    }
    let s = &report.savings;
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "review {} of {} modules: {:.1} min instead of {:.1} h, {} anomalous modules lost",
        s.modules_to_review,
        s.total_modules,
        s.review_time_s / 60.0,
        s.baseline_time_s / 3600.0,
        s.lost_anomalies
    );
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn samples(labels: &[u8], scores: &[f64]) -> Vec<ScoredSample> {
        labels.iter().zip(scores).map(|(&l, &s)| ScoredSample::new(s, l == 1)).collect()
    }

    fn mann_whitney(samples: &[ScoredSample]) -> f64 {
        let pos: Vec<f64> = samples.iter().filter(|s| s.positive()).map(|s| s.score).collect();
        let neg: Vec<f64> = samples.iter().filter(|s| !s.positive()).map(|s| s.score).collect();
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    fn exhaustive_ap(samples: &[ScoredSample]) -> f64 {
        let mut thresholds: Vec<f64> = samples.iter().map(|s| s.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let positives = samples.iter().filter(|s| s.positive()).count() as u64;
        let mut weighted = 0.0;
        let mut previous_tp = 0;
        for t in thresholds {
            let tp = samples.iter().filter(|s| s.score >= t && s.positive()).count() as u64;
            let fp = samples.iter().filter(|s| s.score >= t && !s.positive()).count() as u64;
            if tp > previous_tp {
                weighted += (tp - previous_tp) as f64 * (tp as f64 / (tp + fp) as f64);
            }
            previous_tp = tp;
        }
        weighted / positives as f64
    }

    #[test]
    fn worked_example() {
        let s = samples(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]);
        assert_eq!(auroc(&s).unwrap(), 0.75);
        assert!((average_precision(&s).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&samples(&[1, 0], &[0.9, 0.1])).unwrap(), 1.0);
        assert_eq!(auroc(&samples(&[1, 0, 1, 0], &[0.3; 4])).unwrap(), 0.5);
        assert!(matches!(auroc(&samples(&[1, 1], &[0.3, 0.2])), Err(Error::UndefinedMetric { .. })));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&samples(&[1, 1, 0], &[0.9, 0.8, 0.1])).unwrap(), 1.0);
        let many: Vec<ScoredSample> = (0..300).map(|i| ScoredSample::new(f64::from(i) / 300.0, i >= 150)).collect();
        assert_eq!(average_precision(&many).unwrap(), 1.0);
        for n in 1..20 {
            let mut labels = vec![0u8; n];
            labels[n - 1] = 1;
            let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
            assert!((average_precision(&samples(&labels, &scores)).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        }
        assert!(average_precision(&samples(&[0, 0], &[0.1, 0.2])).is_err());
    }

    #[test]
    fn metric_oracles_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.random_range(2..=200);
            let levels = rng.random_range(2..=50);
            let mut s: Vec<ScoredSample> = (0..n)
                .map(|_| ScoredSample::new(rng.random_range(0..=levels) as f64 / levels as f64, rng.random_bool(0.3)))
                .collect();
            s[0].label = BinaryLabel::Anomalous;
            s[1].label = BinaryLabel::Normal;
            assert!((auroc(&s).unwrap() - mann_whitney(&s)).abs() < 1e-12);
            assert_eq!(average_precision(&s).unwrap(), exhaustive_ap(&s));
        }
    }

    #[test]
    fn confusion_examples() {
        let perfect = samples(&[1, 1, 0, 0], &[1.0, 1.0, 0.0, 0.0]);
        let m = confusion(&perfect, 0.5);
        assert_eq!((m.fp, m.fn_), (0, 0));
        let zeros = samples(&[1, 1, 0], &[0.0; 3]);
        let m = confusion(&zeros, 0.1);
        assert_eq!((m.tp, m.fp), (0, 0));

        // 100 normals with 7 false alarms, 100 anomalies with 12 misses
        let mut s = Vec::new();
        for i in 0..100 {
            s.push(ScoredSample::new(if i < 7 { 0.9 } else { 0.05 }, false));
            s.push(ScoredSample::new(if i < 12 { 0.05 } else { 0.9 }, true));
        }
        let m = confusion(&s, 0.1);
        assert_eq!(m, ConfusionMatrix { tp: 88, fp: 7, tn: 93, fn_: 12 });
        assert_eq!(m.tpr(), Some(0.88));
        assert_eq!(m.fpr(), Some(0.07));
        assert_eq!(m.tnr(), Some(0.93));
        assert_eq!(m.fnr(), Some(0.12));
        assert_eq!(m.precision(), Some(88.0 / 95.0));
    }

    #[test]
    fn g_mean_examples() {
        let s = samples(&[1, 1, 0, 0], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(g_mean(&s, 0.5).unwrap(), 1.0);
        assert_eq!(g_mean(&s, 1.0).unwrap(), 0.0);
        let mut s = Vec::new();
        for i in 0..10 {
            s.push(ScoredSample::new(if i < 8 { 1.0 } else { 0.0 }, true));
            s.push(ScoredSample::new(if i < 2 { 1.0 } else { 0.0 }, false));
        }
        assert!((g_mean(&s, 0.5).unwrap() - 0.8).abs() < 1e-15);
        assert!(g_mean(&samples(&[1], &[1.0]), 0.5).is_err());
    }

    #[test]
    fn per_fault_table() {
        let mut s = Vec::new();
        for i in 0..10 {
            s.push(ScoredSample { fault_class: Some(FaultClass::Chs), ..ScoredSample::new(if i < 7 { 0.0 } else { 0.5 }, true) });
        }
        s.push(ScoredSample { fault_class: Some(FaultClass::Pid), ..ScoredSample::new(0.9, true) });
        let table = per_fault_errors(&s, 0.1);
        assert_eq!(table[&FaultClass::Chs].percent_missed, Some(70.0));
        assert_eq!(table[&FaultClass::Pid].percent_missed, Some(0.0));
        assert_eq!(table[&FaultClass::Mh].display(), "--");
        assert_eq!(table.len(), 10);
    }

    #[test]
    fn selection() {
        let rising: Vec<ValidationPoint> =
            (0..5).map(|i| ValidationPoint { step: i * 100, auroc: Some(i as f64), ap: None }).collect();
        assert_eq!(select_model(&rising, SelectionCriterion::Auroc).unwrap(), 400);
        assert!(select_model(&rising, SelectionCriterion::Ap).is_err());
        let peak: Vec<ValidationPoint> = (0..=10)
            .map(|i| ValidationPoint { step: i * 100, auroc: None, ap: Some(-((i as f64) - 6.0).abs()) })
            .collect();
        assert_eq!(select_model(&peak, SelectionCriterion::Ap).unwrap(), 600);
        let flat: Vec<ValidationPoint> = (0..3).map(|i| ValidationPoint { step: i, auroc: Some(0.5), ap: None }).collect();
        assert_eq!(select_model(&flat, SelectionCriterion::Auroc).unwrap(), 0);
        assert!(select_model(&[], SelectionCriterion::Auroc).is_err());
    }

    #[test]
    fn savings_examples() {
        let r = savings_report(14662, 296, 0.981, 270.0 / 296.0, 3.0).unwrap();
        assert_eq!(r.modules_to_review, 543);
        assert_eq!(r.lost_anomalies, 26);
        assert_eq!(r.review_time_s, 1629.0);
        assert_eq!(r.baseline_time_s, 43986.0);
        assert_eq!((r.review_time_s / 60.0).round(), 27.0);
        assert_eq!((r.baseline_time_s / 360.0).round() / 10.0, 12.2);

        let perfect = savings_report(1000, 40, 1.0, 1.0, 3.0).unwrap();
        assert_eq!((perfect.modules_to_review, perfect.lost_anomalies), (40, 0));
        assert_eq!(savings_report(1000, 40, 0.0, 1.0, 3.0).unwrap().modules_to_review, 1000);
        assert!(savings_report(10, 20, 0.5, 0.5, 3.0).is_err());
        assert!(savings_report(10, 2, 1.5, 0.5, 3.0).is_err());
    }

    #[test]
    fn reversed_scores_complement_auroc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s: Vec<ScoredSample> = (0..50).map(|_| ScoredSample::new(rng.random(), rng.random_bool(0.5))).collect();
        s[0].label = BinaryLabel::Anomalous;
        s[1].label = BinaryLabel::Normal;
        let flipped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { score: 1.0 - x.score, ..*x }).collect();
        assert!((auroc(&s).unwrap() + auroc(&flipped).unwrap() - 1.0).abs() < 1e-12);
    }
}
