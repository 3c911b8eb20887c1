//! Evaluation metrics over scores and binary or class labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A sample-averaged value with the samples left out of the average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleAvg {
    pub value: f64,
    pub used: usize,
    pub excluded: usize,
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return invalid("scores must be finite");
    }
    Ok(())
}

fn check_matrix(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<usize> {
    if scores.len() != labels.len() {
        return invalid(format!("{} score rows vs {} label rows", scores.len(), labels.len()));
    }
    let width = scores.first().map_or(0, Vec::len);
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != width || l.len() != width {
            return invalid("ragged score or label rows");
        }
        check_finite(s)?;
    }
    Ok(width)
}

/// Average 1-based ranks, ties sharing the mean of their positions.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid(format!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    check_finite(scores)?;
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return invalid("AuROC needs both classes");
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Ok((pos_rank_sum - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64))
}

/// Step-interpolated average precision. Tied scores form one threshold, so
/// an all-tied input scores the positive prevalence.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid(format!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    check_finite(scores)?;
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return invalid("average precision needs a positive");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut group_pos = 0;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            group_pos += usize::from(labels[idx[j]]);
            j += 1;
        }
        tp += group_pos;
        seen += j - i;
        if group_pos > 0 {
            ap += (group_pos as f64 / total_pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Per-sample average precision averaged over samples; samples without
/// positives are excluded and counted.
pub fn auprc_sample_avg(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<SampleAvg> {
    check_matrix(scores, labels)?;
    let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        if !l.iter().any(|&x| x) {
            excluded += 1;
            continue;
        }
        sum += average_precision(s, l)?;
        used += 1;
    }
    if used == 0 {
        return invalid("no sample has a positive label");
    }
    Ok(SampleAvg { value: sum / used as f64, used, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Variant {
    /// All entries pooled into one binary problem.
    Binary,
    /// F1 per sample over its labels, averaged over samples.
    SampleMacro,
    /// F1 per label over samples, weighted by label support.
    Weighted,
    /// Weighted F1 where each sample's top-|GT| scores are the positives.
    InflatedWeighted,
}

impl std::str::FromStr for F1Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Self::Binary),
            "sample-macro" => Ok(Self::SampleMacro),
            "weighted" => Ok(Self::Weighted),
            "inflated-weighted" => Ok(Self::InflatedWeighted),
            other => invalid(format!("unknown F1 variant `{other}`")),
        }
    }
}

/// F1 from confusion counts; a case with nothing predicted and nothing
/// present counts as perfect.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Indices of the `k` largest scores, ties going to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn weighted_f1(pred: &[Vec<bool>], labels: &[Vec<bool>], width: usize) -> Result<f64> {
    let (mut num, mut support_total) = (0.0, 0usize);
    for j in 0..width {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, l) in pred.iter().zip(labels) {
            match (p[j], l[j]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let support = tp + fn_;
        if support > 0 {
            num += support as f64 * f1_from_counts(tp, fp, fn_);
            support_total += support;
        }
    }
    if support_total == 0 {
        return invalid("weighted F1 needs at least one positive label");
    }
    Ok(num / support_total as f64)
}

pub fn f1_scores(scores: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64, variant: F1Variant) -> Result<f64> {
    let width = check_matrix(scores, labels)?;
    if scores.is_empty() {
        return invalid("F1 of an empty set");
    }
    if variant != F1Variant::InflatedWeighted && !(threshold > 0.0 && threshold < 1.0) {
        return invalid(format!("threshold {threshold} must lie in (0,1)"));
    }
    let thresholded = || -> Vec<Vec<bool>> { scores.iter().map(|s| s.iter().map(|&x| x >= threshold).collect()).collect() };
    match variant {
        F1Variant::Binary => {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (p, l) in thresholded().iter().zip(labels) {
                for (&p, &l) in p.iter().zip(l) {
                    match (p, l) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
            Ok(f1_from_counts(tp, fp, fn_))
        }
        F1Variant::SampleMacro => {
            let pred = thresholded();
            let mut sum = 0.0;
            for (p, l) in pred.iter().zip(labels) {
                let tp = p.iter().zip(l).filter(|(&a, &b)| a && b).count();
                let fp = p.iter().zip(l).filter(|(&a, &b)| a && !b).count();
                let fn_ = p.iter().zip(l).filter(|(&a, &b)| !a && b).count();
                sum += f1_from_counts(tp, fp, fn_);
            }
            Ok(sum / scores.len() as f64)
        }
        F1Variant::Weighted => weighted_f1(&thresholded(), labels, width),
        F1Variant::InflatedWeighted => {
            let pred: Vec<Vec<bool>> = scores
                .iter()
                .zip(labels)
                .map(|(s, l)| {
                    let mut row = vec![false; width];
                    for i in top_k(s, l.iter().filter(|&&x| x).count()) {
                        row[i] = true;
                    }
                    row
                })
                .collect();
            weighted_f1(&pred, labels, width)
        }
    }
}

/// Mean over samples of `|top-k ∩ GT| / |GT|`; samples with empty GT are
/// excluded and counted.
pub fn recall_at_k(scores: &[Vec<f64>], labels: &[Vec<bool>], k: usize) -> Result<SampleAvg> {
    check_matrix(scores, labels)?;
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        let gt = l.iter().filter(|&&x| x).count();
        if gt == 0 {
            excluded += 1;
            continue;
        }
        let hits = top_k(s, k).into_iter().filter(|&i| l[i]).count();
        sum += hits as f64 / gt as f64;
        used += 1;
    }
    if used == 0 {
        return invalid("no sample has a positive label");
    }
    Ok(SampleAvg { value: sum / used as f64, used, excluded })
}

/// One-vs-rest AuROC per class present, weighted by class support.
pub fn weighted_auroc(scores: &[Vec<f64>], classes: &[usize]) -> Result<f64> {
    if scores.len() != classes.len() {
        return invalid(format!("{} score rows vs {} classes", scores.len(), classes.len()));
    }
    let width = scores.first().map_or(0, Vec::len);
    if let Some(&c) = classes.iter().find(|&&c| c >= width) {
        return invalid(format!("class {c} outside {width} score columns"));
    }
    let mut support = vec![0usize; width];
    for &c in classes {
        support[c] += 1;
    }
    if support.iter().filter(|&&s| s > 0).count() < 2 {
        return invalid("weighted AuROC needs at least two classes present");
    }
    let mut num = 0.0;
    for (c, &s) in support.iter().enumerate() {
        if s == 0 {
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let lab: Vec<bool> = classes.iter().map(|&y| y == c).collect();
        num += s as f64 * auroc(&col, &lab)?;
    }
    Ok(num / classes.len() as f64)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return invalid("percentile needs values and q in [0,100]");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub name: String,
    pub n_samples: usize,
    pub prevalence: f64,
    pub metrics: BTreeMap<String, f64>,
    /// Why metrics are missing, for empty or single-class subgroups.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_samples: usize,
    pub threshold: Option<f64>,
    pub excluded: BTreeMap<String, usize>,
    pub subgroups: Vec<SubgroupReport>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>, n_samples: usize, threshold: Option<f64>) -> Self {
        Self { task: task.into(), metrics: BTreeMap::new(), n_samples, threshold, excluded: BTreeMap::new(), subgroups: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.metrics {
            if !(0.0..=1.0).contains(v) {
                return invalid(format!("metric {k}={v} outside [0,1]"));
            }
        }
        let f1 = self.metrics.keys().any(|k| k.starts_with("f1") && !k.contains("inflated"));
        if f1 && self.threshold.is_none() {
            return invalid("thresholded F1 reported without its threshold");
        }
        Ok(())
    }
}
