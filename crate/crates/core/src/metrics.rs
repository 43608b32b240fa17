//! Evaluation metrics: ACC, AUC, precision, recall, F1, AP, and AC.
//!
//! Malignant (class 1) is the positive class throughout. Thresholded
//! metrics classify a sample positive when its positive-class probability
//! strictly exceeds 0.5, matching the arg-max rule with ties broken toward
//! class 0. AUC follows the Mann-Whitney formulation with half credit for
//! tied scores; AP is the step-wise area under the precision-recall curve
//! over descending score thresholds; AC is the mean predicted-class
//! probability over correctly classified samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation run. `auc` and `ap` are undefined (not zero) when the
/// labels contain a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: Option<f64>,
    pub ac: f64,
    pub n_samples: usize,
    /// Always "malignant"; recorded for the sake of downstream readers.
    pub positive_class: String,
}

fn validate(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid_input("need at least one sample"));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid_input(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid_input("scores must be finite"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid_input("labels must be 0 or 1"));
    }
    Ok(())
}

/// Area under the ROC curve by the rank-sum (Mann-Whitney) formulation,
/// with tied scores credited 0.5. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    validate(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    // Average ranks (1-based) with ties sharing their mean rank.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = mean_rank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let p = positives as f64;
    let n = negatives as f64;
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Average precision: the step-wise area under the precision-recall curve
/// over descending score thresholds, with tied scores collapsed into one
/// threshold. `None` when only one class is present.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    validate(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(Some(ap))
}

/// Full metric suite. `confidences[i]` is the probability the classifier
/// assigned to its predicted class for sample `i` and feeds only the AC
/// metric.
pub fn compute_report(scores: &[f64], labels: &[u8], confidences: &[f64]) -> Result<EvalReport> {
    validate(scores, labels)?;
    if confidences.len() != scores.len() {
        return Err(Error::invalid_input(format!(
            "{} confidences vs {} scores",
            confidences.len(),
            scores.len()
        )));
    }
    if confidences
        .iter()
        .any(|c| !c.is_finite() || !(0.0..=1.0).contains(c))
    {
        return Err(Error::invalid_input("confidences must lie in [0, 1]"));
    }

    let n = scores.len();
    let predicted: Vec<u8> = scores.iter().map(|&s| u8::from(s > 0.5)).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut correct = 0usize;
    let mut correct_conf_sum = 0.0;
    for i in 0..n {
        if predicted[i] == labels[i] {
            correct += 1;
            correct_conf_sum += confidences[i];
        }
        match (predicted[i], labels[i]) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let acc = correct as f64 / n as f64;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let ac = if correct > 0 {
        correct_conf_sum / correct as f64
    } else {
        0.0
    };

    Ok(EvalReport {
        acc,
        auc: auc(scores, labels)?,
        precision,
        recall,
        f1,
        ap: average_precision(scores, labels)?,
        ac,
        n_samples: n,
        positive_class: "malignant".to_string(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "undef".to_string(),
    }
}

/// Render named reports as a fixed-width table.
pub fn report_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6}\n",
        "model", "ACC", "AUC", "Prec", "Reca", "F1", "AP", "AC", "n"
    ));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<12} {:>7.4} {:>7} {:>7.4} {:>7.4} {:>7.4} {:>7} {:>7.4} {:>6}\n",
            name,
            r.acc,
            fmt_opt(r.auc),
            r.precision,
            r.recall,
            r.f1,
            fmt_opt(r.ap),
            r.ac,
            r.n_samples
        ));
    }
    out
}
