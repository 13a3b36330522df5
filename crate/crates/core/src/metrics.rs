//! Threshold-sweep detection metrics.
//!
//! Every metric sweeps thresholds over the distinct score values, highest
//! first; timesteps with equal scores always cross a threshold together.
//! Higher scores mean "more abnormal".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Label;
use crate::scoring::ScoreSeries;

/// Cumulative `(true positives, false positives)` after each distinct
/// threshold, highest score first.
fn sweep(scores: &[f64], positives: &[bool]) -> Result<(Vec<(usize, usize)>, usize, usize)> {
    if scores.len() != positives.len() {
        return Err(Error::Parameter(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score at index {i}")));
    }
    let p = positives.iter().filter(|&&b| b).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::SingleClass(format!("{p} positive and {n} negative samples")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &idx) in order.iter().enumerate() {
        if positives[idx] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(i + 1).is_none_or(|&next| scores[next] != scores[idx]);
        if last_of_group {
            points.push((tp, fp));
        }
    }
    Ok((points, p, n))
}

/// Area under the ROC curve by the trapezoid rule over grouped thresholds.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (points, p, n) = sweep(scores, positives)?;
    let mut area = 0.0;
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    for (tp, fp) in points {
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        (prev_tp, prev_fp) = (tp, fp);
    }
    Ok(area / (p as f64 * n as f64))
}

/// Step-wise area under the precision-recall curve (average precision):
/// the precision at each threshold weighted by the recall it adds.
pub fn pr_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (points, p, _) = sweep(scores, positives)?;
    let mut area = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in points {
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(area / p as f64)
}

/// Smallest false-positive rate over thresholds reaching `target` recall.
pub fn fpr_at_tpr(scores: &[f64], positives: &[bool], target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Parameter(format!("target TPR {target} outside [0, 1]")));
    }
    let (points, p, n) = sweep(scores, positives)?;
    Ok(points
        .into_iter()
        .filter(|&(tp, _)| tp as f64 / p as f64 >= target)
        .map(|(_, fp)| fp as f64 / n as f64)
        .fold(1.0, f64::min))
}

/// Headline metrics over one pool of timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub aupr_abnormal: f64,
    pub aupr_normal: f64,
    pub fpr_at_95_tpr: f64,
    pub abnormal: usize,
    pub normal: usize,
}

pub fn metrics(scores: &[f64], abnormal: &[bool]) -> Result<Metrics> {
    let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
    let normal: Vec<bool> = abnormal.iter().map(|a| !a).collect();
    let positives = abnormal.iter().filter(|&&a| a).count();
    Ok(Metrics {
        auroc: roc_auc(scores, abnormal)?,
        aupr_abnormal: pr_auc(scores, abnormal)?,
        aupr_normal: pr_auc(&negated, &normal)?,
        fpr_at_95_tpr: fpr_at_tpr(scores, abnormal, 0.95)?,
        abnormal: positives,
        normal: abnormal.len() - positives,
    })
}

/// One scored, labeled, non-ignored timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub score: f64,
    pub abnormal: bool,
    pub anomaly_type: Option<&'a str>,
}

/// Scored timesteps of `series`, dropping `ignored` labels and timesteps
/// without a score.
pub fn samples(series: &[ScoreSeries]) -> Vec<Sample<'_>> {
    series
        .iter()
        .flat_map(|s| {
            s.labels.iter().zip(&s.scores).filter_map(move |(&label, score)| {
                let score = (*score)?;
                match label {
                    Label::Ignored => None,
                    _ => Some(Sample {
                        score,
                        abnormal: label == Label::Abnormal,
                        anomaly_type: s.anomaly_type.as_deref(),
                    }),
                }
            })
        })
        .collect()
}

/// AUROC of each anomaly type's abnormal timesteps against every normal
/// timestep. Types without abnormal timesteps are omitted.
pub fn per_type_auroc(series: &[ScoreSeries]) -> Result<BTreeMap<String, f64>> {
    let all = samples(series);
    let normal: Vec<f64> = all.iter().filter(|s| !s.abnormal).map(|s| s.score).collect();
    let mut by_type: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in all.iter().filter(|s| s.abnormal) {
        by_type.entry(s.anomaly_type.unwrap_or("unspecified")).or_default().push(s.score);
    }
    let mut table = BTreeMap::new();
    for (kind, abnormal) in by_type {
        let scores: Vec<f64> = abnormal.iter().chain(&normal).copied().collect();
        let labels: Vec<bool> = (0..scores.len()).map(|i| i < abnormal.len()).collect();
        table.insert(kind.to_string(), roc_auc(&scores, &labels)?);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: Metrics,
    /// AUROC by anomaly type.
    pub per_type: BTreeMap<String, f64>,
    pub scenes: usize,
}

pub fn evaluate(series: &[ScoreSeries]) -> Result<MetricReport> {
    let all = samples(series);
    let scores: Vec<f64> = all.iter().map(|s| s.score).collect();
    let abnormal: Vec<bool> = all.iter().map(|s| s.abnormal).collect();
    Ok(MetricReport {
        overall: metrics(&scores, &abnormal)?,
        per_type: per_type_auroc(series)?,
        scenes: series.len(),
    })
}

impl MetricReport {
    /// Plain-text tables: overall metrics, then AUROC per anomaly type.
    pub fn to_table(&self) -> String {
        let m = &self.overall;
        let mut out = String::new();
        out.push_str("metric              value\n");
        out.push_str(&format!("AUROC               {:.4}\n", m.auroc));
        out.push_str(&format!("AUPR-Abnormal       {:.4}\n", m.aupr_abnormal));
        out.push_str(&format!("AUPR-Normal         {:.4}\n", m.aupr_normal));
        out.push_str(&format!("FPR@95%TPR          {:.4}\n", m.fpr_at_95_tpr));
        out.push_str(&format!("abnormal timesteps  {}\n", m.abnormal));
        out.push_str(&format!("normal timesteps    {}\n", m.normal));
        out.push_str("\nanomaly type            AUROC\n");
        for (kind, auroc) in &self.per_type {
            out.push_str(&format!("{kind:<24}{auroc:.4}\n"));
        }
        out
    }
}
