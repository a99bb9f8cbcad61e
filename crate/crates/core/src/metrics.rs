//! Classification metrics and fold aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// `(precision, recall, f1)` averaged with equal weight over all `classes`.
/// A class whose precision or recall has a zero denominator scores 0.
pub fn macro_prf1(pred: &[usize], truth: &[usize], classes: usize) -> Result<(f64, f64, f64)> {
    check_lengths(pred, truth)?;
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], tp[c] + fn_[c]);
        sp += p;
        sr += r;
        sf += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let k = classes as f64;
    Ok((sp / k, sr / k, sf / k))
}

/// Average (1-based) ranks with ties sharing the mean of their positions.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann-Whitney U statistic. Returns NaN
/// when one of the two classes is absent.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> f64 {
    assert_eq!(scores.len(), positive.len(), "one score per label");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// Macro average of one-vs-rest AUCs over the classes where both the class
/// and its complement occur. `probs` is row-major `N x C`.
pub fn roc_auc_ovr_macro(probs: &[f64], classes: usize, truth: &[usize]) -> f64 {
    assert_eq!(probs.len(), truth.len() * classes, "probability matrix shape");
    let aucs: Vec<f64> = (0..classes)
        .map(|c| {
            let column: Vec<f64> = probs.iter().skip(c).step_by(classes).copied().collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            roc_auc_binary(&column, &positive)
        })
        .filter(|a| !a.is_nan())
        .collect();
    if aucs.is_empty() {
        f64::NAN
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

/// Test-fold scores of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when undefined for this fold (serialized as `null`).
    pub roc_auc: Option<f64>,
    pub epochs_ran: usize,
}

impl FoldMetrics {
    /// Metrics from predicted class probabilities (`N x C`, row-major).
    /// For binary tasks `probs` may also hold one positive-class probability
    /// per row.
    pub fn evaluate(fold: usize, probs: &[f64], classes: usize, truth: &[usize], epochs_ran: usize) -> Result<Self> {
        let n = truth.len();
        let (pred, auc) = if classes == 2 && probs.len() == n {
            let pred: Vec<usize> = probs.iter().map(|&p| usize::from(p >= 0.5)).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            (pred, roc_auc_binary(probs, &positive))
        } else {
            if probs.len() != n * classes {
                return Err(Error::Dimension(format!(
                    "{} probabilities for {n} samples and {classes} classes",
                    probs.len()
                )));
            }
            (argmax_rows(probs, classes), roc_auc_ovr_macro(probs, classes, truth))
        };
        let (precision, recall, f1) = macro_prf1(&pred, truth, classes)?;
        Ok(Self {
            fold,
            accuracy: accuracy(&pred, truth)?,
            precision,
            recall,
            f1,
            roc_auc: (!auc.is_nan()).then_some(auc),
            epochs_ran,
        })
    }

    fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("roc_auc", self.roc_auc.unwrap_or(f64::NAN)),
        ]
    }
}

/// Index of the largest entry in each row; the first one wins ties.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Mean and sample standard deviation over the defined folds of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

impl Summary {
    /// NaN entries are skipped. With no defined values both statistics are NaN.
    pub fn of(values: &[f64]) -> Self {
        let defined: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
        let n = defined.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                folds: 0,
            };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, folds: n }
    }

    /// `0.943 ± 0.081`
    pub fn display(&self, decimals: usize) -> String {
        if self.mean.is_nan() {
            "n/a".to_string()
        } else {
            format!("{:.*} ± {:.*}", decimals, self.mean, decimals, self.std)
        }
    }
}

/// Cross-validated results of one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub fold_count: usize,
    pub folds: Vec<FoldMetrics>,
    pub summary: BTreeMap<String, Summary>,
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "precision", "recall", "f1", "roc_auc"];

impl RunReport {
    pub fn aggregate(dataset: &str, model: &str, seed: u64, folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Data(format!("{dataset}/{model}: no folds to aggregate")));
        }
        let summary = METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let column: Vec<f64> = folds.iter().map(|f| f.values()[k].1).collect();
                (name.to_string(), Summary::of(&column))
            })
            .collect();
        Ok(Self {
            dataset: dataset.to_string(),
            model: model.to_string(),
            seed,
            fold_count: folds.len(),
            folds,
            summary,
        })
    }

    pub fn metric(&self, name: &str) -> Summary {
        self.summary.get(name).copied().unwrap_or(Summary {
            mean: f64::NAN,
            std: f64::NAN,
            folds: 0,
        })
    }
}
