//! Metrics, operating-point selection, comparison grids and lead-time
//! analysis.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    Ok(())
}

/// Twice the Mann-Whitney U statistic of the positives, as an integer, with
/// the class sizes. Ties count half, hence the doubling.
fn doubled_u(scores: &[f64], labels: &[bool]) -> Result<(u128, u128, u128)> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Doubled midrank of positions start..end (1-based ranks).
        let r2 = (start + end + 1) as u128;
        let pos = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        rank_sum2 += r2 * pos;
        start = end;
    }
    Ok((rank_sum2 - n_pos * (n_pos + 1), n_pos, n_neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (u2, n_pos, n_neg) = doubled_u(scores, labels)?;
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `None` when there are no positives.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `None` when there are no negatives.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Confusion counts with `score >= threshold` read as positive.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensSpec {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub confusion: Confusion,
}

pub fn sens_spec(scores: &[f64], labels: &[bool], threshold: f64) -> Result<SensSpec> {
    let c = confusion(scores, labels, threshold)?;
    Ok(SensSpec {
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        confusion: c,
    })
}

/// Threshold maximizing `sensitivity + specificity - 1` among the lowest
/// score (everything positive) and the midpoints of consecutive distinct
/// scores; the lowest wins ties.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sweep upward: below the next group every score so far is negative.
    let mut neg_below = 0usize;
    let mut pos_below = 0usize;
    let mut best = (0.0, scores[order[0]]);
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if labels[i] {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
        }
        if end < order.len() {
            let t = 0.5 * (scores[order[start]] + scores[order[end]]);
            let sens = (n_pos - pos_below) as f64 / n_pos as f64;
            let spec = neg_below as f64 / n_neg as f64;
            let j = sens + spec - 1.0;
            if j > best.0 {
                best = (j, t);
            }
        }
        start = end;
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub threshold: f64,
    pub confusion: Confusion,
    pub n: usize,
}

pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    let auc = roc_auc(scores, labels)?;
    let ss = sens_spec(scores, labels, threshold)?;
    Ok(EvalReport {
        auc,
        sensitivity: ss.sensitivity,
        specificity: ss.specificity,
        threshold,
        confusion: ss.confusion,
        n: scores.len(),
    })
}

/// One row of a with/without-lung-mask comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub split: String,
    pub lung_mask: bool,
    pub report: EvalReport,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Split", "Lung mask", "AUC", "Sensitivity", "Specificity"])?;
    for r in rows {
        w.write_record([
            r.split.clone(),
            if r.lung_mask { "yes" } else { "no" }.to_string(),
            format!("{:.4}", r.report.auc),
            opt(r.report.sensitivity),
            opt(r.report.specificity),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A labelled report row for per-stage metric grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub model: String,
    /// `fixed` or `youden`.
    pub rule: String,
    pub report: EvalReport,
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "Split",
        "Model",
        "Threshold rule",
        "Threshold",
        "AUC",
        "Sensitivity",
        "Specificity",
        "TP",
        "FP",
        "TN",
        "FN",
        "N",
    ])?;
    for r in rows {
        let c = r.report.confusion;
        w.write_record([
            r.split.clone(),
            r.model.clone(),
            r.rule.clone(),
            format!("{:.6}", r.report.threshold),
            format!("{:.4}", r.report.auc),
            opt(r.report.sensitivity),
            opt(r.report.specificity),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            r.report.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capture {
    pub date: NaiveDate,
    /// Whether the model called this capture positive.
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseTimeline {
    pub case_id: String,
    pub symptom_onset_date: Option<NaiveDate>,
    pub rtpcr_confirm_date: Option<NaiveDate>,
    /// Sorted by date.
    pub captures: Vec<Capture>,
}

impl CaseTimeline {
    pub fn new(
        case_id: impl Into<String>,
        symptom_onset_date: Option<NaiveDate>,
        rtpcr_confirm_date: Option<NaiveDate>,
        mut captures: Vec<Capture>,
    ) -> Self {
        captures.sort_by_key(|c| c.date);
        CaseTimeline {
            case_id: case_id.into(),
            symptom_onset_date,
            rtpcr_confirm_date,
            captures,
        }
    }

    pub fn first_positive(&self) -> Option<NaiveDate> {
        self.captures.iter().filter(|c| c.positive).map(|c| c.date).min()
    }
}

/// Days from the earliest positive capture to RT-PCR confirmation. Negative
/// when the model only caught the case after confirmation.
pub fn lead_time(case: &CaseTimeline) -> Option<i64> {
    let confirm = case.rtpcr_confirm_date?;
    Some((confirm - case.first_positive()?).num_days())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadRow {
    pub case_id: String,
    pub symptom_onset_date: Option<NaiveDate>,
    pub rtpcr_confirm_date: Option<NaiveDate>,
    pub first_positive: Option<NaiveDate>,
    pub lead_days: Option<i64>,
    pub captures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortLeadReport {
    pub at_least_2_days: usize,
    pub at_least_5_days: usize,
    pub defined: usize,
    pub rows: Vec<LeadRow>,
}

pub fn cohort_lead_report(cases: &[CaseTimeline]) -> CohortLeadReport {
    let mut rows: Vec<LeadRow> = cases
        .iter()
        .map(|c| LeadRow {
            case_id: c.case_id.clone(),
            symptom_onset_date: c.symptom_onset_date,
            rtpcr_confirm_date: c.rtpcr_confirm_date,
            first_positive: c.first_positive(),
            lead_days: lead_time(c),
            captures: c.captures.len(),
        })
        .collect();
    rows.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let leads: Vec<i64> = rows.iter().filter_map(|r| r.lead_days).collect();
    CohortLeadReport {
        at_least_2_days: leads.iter().filter(|&&d| d >= 2).count(),
        at_least_5_days: leads.iter().filter(|&&d| d >= 5).count(),
        defined: leads.len(),
        rows,
    }
}

impl CohortLeadReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "case_id",
            "symptom_onset_date",
            "rtpcr_confirm_date",
            "first_positive_capture",
            "lead_days",
            "captures",
        ])?;
        let date = |d: Option<NaiveDate>| d.map(|d| d.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.case_id.clone(),
                date(r.symptom_onset_date),
                date(r.rtpcr_confirm_date),
                date(r.first_positive),
                r.lead_days.map(|d| d.to_string()).unwrap_or_default(),
                r.captures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_auc() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(roc_auc(&[0.3; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn sensitivity_of_42_out_of_47() {
        let scores: Vec<f64> = (0..47).map(|i| if i < 42 { 0.9 } else { 0.1 }).collect();
        let s = sens_spec(&scores, &[true; 47], 0.5).unwrap();
        assert!((s.sensitivity.unwrap() - 0.8936).abs() < 5e-5);
        assert_eq!(s.specificity, None);
    }

    #[test]
    fn youden_degenerate_cases() {
        assert_eq!(youden_threshold(&[0.4; 3], &[true, false, true]).unwrap(), 0.4);
        let t = youden_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(t, 0.5);
    }

    #[test]
    fn lead_time_fixtures() {
        let d = |s: &str| s.parse::<NaiveDate>().unwrap();
        let case = CaseTimeline::new(
            "a",
            None,
            Some(d("2020-01-31")),
            vec![
                Capture {
                    date: d("2020-01-20"),
                    positive: true,
                },
                Capture {
                    date: d("2020-01-14"),
                    positive: true,
                },
                Capture {
                    date: d("2020-01-10"),
                    positive: false,
                },
            ],
        );
        assert_eq!(lead_time(&case), Some(17));
        let none = CaseTimeline::new(
            "b",
            None,
            Some(d("2020-01-31")),
            vec![Capture {
                date: d("2020-01-14"),
                positive: false,
            }],
        );
        assert_eq!(lead_time(&none), None);
    }
}
