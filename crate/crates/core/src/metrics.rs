//! Ranking and calibration metrics for reliability scores.
//!
//! Positive labels mean "the response was correct"; higher scores should rank
//! correct responses first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::Vocabulary;

pub const DEFAULT_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub label: bool,
}

impl LabeledScore {
    pub fn new(score: f64, label: bool) -> Self {
        LabeledScore { score, label }
    }
}

fn check_scores(items: &[LabeledScore]) -> Result<(usize, usize)> {
    if items.iter().any(|i| !i.score.is_finite()) {
        return Err(Error::input("scores must be finite"));
    }
    let pos = items.iter().filter(|i| i.label).count();
    Ok((pos, items.len() - pos))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn descending_groups(items: &[LabeledScore]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].score.total_cmp(&items[a].score));
    let mut groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let s = items[order[start]].score;
        let mut end = start;
        let (mut pos, mut neg) = (0, 0);
        while end < order.len() && items[order[end]].score == s {
            if items[order[end]].label {
                pos += 1;
            } else {
                neg += 1;
            }
            end += 1;
        }
        groups.push((pos, neg));
        start = end;
    }
    groups
}

/// Mann–Whitney estimate of `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn auroc(items: &[LabeledScore]) -> Result<f64> {
    let (pos, neg) = check_scores(items)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positive and negative labels".into()));
    }
    // Walk groups from the lowest score up, counting negatives strictly below.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    for (p, n) in descending_groups(items).into_iter().rev() {
        twice_u += p as u64 * (2 * neg_below + n as u64);
        neg_below += n as u64;
    }
    Ok(twice_u as f64 / (2 * pos as u64 * neg as u64) as f64)
}

/// Average precision: `Σ (R_t − R_{t−1})·P_t` over distinct score thresholds,
/// taken in descending order with tied scores entering together.
pub fn aupr(items: &[LabeledScore]) -> Result<f64> {
    let (pos, _) = check_scores(items)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive label".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut area = 0.0;
    for (p, n) in descending_groups(items) {
        tp += p;
        seen += p + n;
        if p > 0 {
            area += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// ROC points `(FPR, TPR)` from `(0, 0)` through every distinct threshold, in
/// descending threshold order. The trapezoid area under them equals `auroc`.
pub fn roc_curve(items: &[LabeledScore]) -> Result<Vec<CurvePoint>> {
    let (pos, neg) = check_scores(items)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC needs both positive and negative labels".into()));
    }
    let thresholds = distinct_descending(items);
    let mut out = vec![CurvePoint { threshold: f64::INFINITY, x: 0.0, y: 0.0 }];
    let (mut tp, mut fp) = (0, 0);
    for ((p, n), t) in descending_groups(items).into_iter().zip(thresholds) {
        tp += p;
        fp += n;
        out.push(CurvePoint { threshold: t, x: fp as f64 / neg as f64, y: tp as f64 / pos as f64 });
    }
    Ok(out)
}

/// Precision–recall points `(recall, precision)`, one per distinct threshold.
pub fn pr_curve(items: &[LabeledScore]) -> Result<Vec<CurvePoint>> {
    let (pos, _) = check_scores(items)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs at least one positive label".into()));
    }
    let thresholds = distinct_descending(items);
    let (mut tp, mut seen) = (0, 0);
    let mut out = Vec::with_capacity(thresholds.len());
    for ((p, n), t) in descending_groups(items).into_iter().zip(thresholds) {
        tp += p;
        seen += p + n;
        out.push(CurvePoint { threshold: t, x: tp as f64 / pos as f64, y: tp as f64 / seen as f64 });
    }
    Ok(out)
}

fn distinct_descending(items: &[LabeledScore]) -> Vec<f64> {
    let mut s: Vec<f64> = items.iter().map(|i| i.score).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.dedup_by(|a, b| a == b);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence; 0 for empty bins.
    pub confidence: f64,
    /// Fraction correct; 0 for empty bins.
    pub accuracy: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Expected calibration error over `bins` equal-width bins on `[0, 1]`.
/// Confidence 1.0 falls into the last bin.
pub fn ece(confidences: &[f64], labels: &[bool], bins: usize) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(Error::input("ECE needs at least one bin"));
    }
    if confidences.len() != labels.len() {
        return Err(Error::input("confidences and labels differ in length"));
    }
    if confidences.is_empty() {
        return Err(Error::UndefinedMetric("ECE of an empty set".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::input(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (&c, &l) in confidences.iter().zip(labels) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        correct[b] += l as usize;
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let (confidence, accuracy) = if count[b] == 0 {
            (0.0, 0.0)
        } else {
            (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
        };
        let weight = count[b] as f64 / n;
        ece += weight * (accuracy - confidence).abs();
        out.push(CalibrationBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            confidence,
            accuracy,
            weight,
        });
    }
    Ok(CalibrationReport { ece, bins: out })
}

/// Min–max rescale onto `[0, 1]`; a constant list maps to 0.5.
pub fn reliability_to_confidence(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::input("no scores to rescale"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::input("scores must be finite"));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.5; scores.len()]);
    }
    Ok(scores.iter().map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation())
}

fn normalize(ids: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    ids.iter()
        .copied()
        .filter(|&id| vocab.token(id).is_some_and(|t| !is_punctuation(t)))
        .collect()
}

/// True iff the response, with punctuation tokens dropped, contains one of the
/// gold answers as a contiguous run.
pub fn label_correctness(response: &[usize], gold: &[Vec<usize>], vocab: &Vocabulary) -> Result<bool> {
    if gold.is_empty() {
        return Err(Error::input("gold answer set is empty"));
    }
    let resp = normalize(response, vocab);
    for answer in gold {
        let answer = normalize(answer, vocab);
        if answer.is_empty() {
            return Err(Error::input("gold answer is empty after normalization"));
        }
        if resp.windows(answer.len()).any(|w| w == answer.as_slice()) {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub positives: usize,
    pub auroc: f64,
    pub aupr: f64,
    pub ece: f64,
}

/// AUROC, AUPR and ECE (after min–max rescaling) of one score set.
pub fn evaluate(scores: &[f64], labels: &[bool], bins: usize) -> Result<(MetricsReport, CalibrationReport)> {
    if scores.len() != labels.len() {
        return Err(Error::input("scores and labels differ in length"));
    }
    let items: Vec<LabeledScore> = scores.iter().zip(labels).map(|(&s, &l)| LabeledScore::new(s, l)).collect();
    let calibration = ece(&reliability_to_confidence(scores)?, labels, bins)?;
    let report = MetricsReport {
        n: items.len(),
        positives: labels.iter().filter(|l| **l).count(),
        auroc: auroc(&items)?,
        aupr: aupr(&items)?,
        ece: calibration.ece,
    };
    Ok((report, calibration))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(scores: &[f64], labels: &[u8]) -> Vec<LabeledScore> {
        scores.iter().zip(labels).map(|(&s, &l)| LabeledScore::new(s, l == 1)).collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&items(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&items(&[0.5, 0.5], &[1, 0])).unwrap(), 0.5);
        assert_eq!(auroc(&items(&[0.2, 0.8, 0.6, 0.4], &[1, 0, 1, 0])).unwrap(), 0.25);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        assert!(matches!(auroc(&items(&[0.1, 0.2], &[1, 1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&items(&[0.3, 0.1, 0.2], &[1, 1, 1])).unwrap(), 1.0);
        assert_eq!(aupr(&items(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        // thresholds 0.8 → P=1/2, R=1/2; 0.7 → P=2/3, R=1
        let v = aupr(&items(&[0.9, 0.8, 0.7], &[0, 1, 1])).unwrap();
        assert!((v - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!(aupr(&items(&[0.9], &[0])).is_err());
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[1.0, 1.0], &[true, true], 10).unwrap().ece, 0.0);
        assert!((ece(&[0.9, 0.9], &[false, false], 10).unwrap().ece - 0.9).abs() < 1e-15);
        let r = ece(&[0.8; 5], &[true, true, true, true, false], 10).unwrap();
        assert!(r.ece.abs() < 1e-15);
        assert!(ece(&[1.2], &[true], 10).is_err());
        assert!(ece(&[0.2], &[true], 0).is_err());
    }

    #[test]
    fn confidence_rescale_examples() {
        assert_eq!(reliability_to_confidence(&[-1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(reliability_to_confidence(&[-0.3; 3]).unwrap(), vec![0.5; 3]);
        assert_eq!(reliability_to_confidence(&[-4.0, -2.0, 0.0]).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn correctness_labels() {
        let v = Vocabulary::with_eos(["the", "answer", "is", "red", "blue", "."]).unwrap();
        let enc = |s: &str| v.encode(s, crate::tinylm::Role::Response).unwrap().into_ids();
        let gold = vec![enc("red")];
        assert!(label_correctness(&enc("red"), &gold, &v).unwrap());
        assert!(!label_correctness(&enc("blue"), &gold, &v).unwrap());
        assert!(label_correctness(&enc("red ."), &gold, &v).unwrap());
        assert!(label_correctness(&enc("the answer is red ."), &gold, &v).unwrap());
        assert!(label_correctness(&enc("red"), &[], &v).is_err());
    }

    #[test]
    fn curves_agree_with_areas() {
        let it = items(&[0.9, 0.8, 0.8, 0.4, 0.3, 0.3], &[1, 0, 1, 1, 0, 0]);
        let roc = roc_curve(&it).unwrap();
        assert_eq!((roc[0].x, roc[0].y), (0.0, 0.0));
        assert_eq!((roc.last().unwrap().x, roc.last().unwrap().y), (1.0, 1.0));
        let area: f64 = roc.windows(2).map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0).sum();
        assert!((area - auroc(&it).unwrap()).abs() < 1e-12);
        let pr = pr_curve(&it).unwrap();
        let ap: f64 = pr.iter().scan(0.0, |prev, p| {
            let d = (p.x - *prev) * p.y;
            *prev = p.x;
            Some(d)
        }).sum();
        assert!((ap - aupr(&it).unwrap()).abs() < 1e-12);
    }
}
