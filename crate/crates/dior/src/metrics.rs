//! Evaluation metrics: accuracy, macro F1, quadratic weighted kappa, all
//! derived from one confusion matrix.

use crate::error::{Error, Result};
use std::io::Write;

/// Row = true class, column = predicted class, both 0-based internally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    /// Build from 1-based label lists.
    pub fn from_labels(truths: &[u8], predictions: &[u8], n_classes: usize) -> Result<Self> {
        if truths.len() != predictions.len() {
            return Err(Error::Contract {
                op: "confusion_matrix",
                detail: format!(
                    "length mismatch: {} truths vs {} predictions",
                    truths.len(),
                    predictions.len()
                ),
            });
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truths.iter().zip(predictions) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: u8, prediction: u8) -> Result<()> {
        let check = |v: u8| -> Result<usize> {
            if v < 1 || v as usize > self.n_classes {
                return Err(Error::Contract {
                    op: "confusion_matrix",
                    detail: format!("label {v} outside 1..{}", self.n_classes),
                });
            }
            Ok(v as usize - 1)
        };
        let (t, p) = (check(truth)?, check(prediction)?);
        self.counts[t * self.n_classes + p] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.n_classes + prediction]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, r: usize) -> u64 {
        (0..self.n_classes).map(|c| self.get(r, c)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|r| self.get(r, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n_classes, other.n_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

fn require_nonempty(cm: &ConfusionMatrix, op: &'static str) -> Result<u64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract {
            op,
            detail: "empty confusion matrix".into(),
        });
    }
    Ok(total)
}

/// trace / total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = require_nonempty(cm, "accuracy")?;
    let trace: u64 = (0..cm.n_classes).map(|i| cm.get(i, i)).sum();
    Ok(trace as f64 / total as f64)
}

/// Mean over classes of per-class F1. A class with zero precision and
/// recall contributes F1 = 0 (included in the mean).
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    require_nonempty(cm, "macro_f1")?;
    let mut sum = 0.0;
    for c in 0..cm.n_classes {
        let tp = cm.get(c, c) as f64;
        let pred = cm.col_sum(c) as f64;
        let truth = cm.row_sum(c) as f64;
        // F1 = 2 tp / (pred + truth), 0 when the denominator vanishes
        if pred + truth > 0.0 {
            sum += 2.0 * tp / (pred + truth);
        }
    }
    Ok(sum / cm.n_classes as f64)
}

/// kappa_w = 1 - (sum w O)/(sum w E), w_ij = (i-j)^2 / (N_c-1)^2,
/// O the proportion matrix and E the outer product of its marginals.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = require_nonempty(cm, "quadratic_weighted_kappa")? as f64;
    let n = cm.n_classes;
    if n < 2 {
        return Err(Error::Contract {
            op: "quadratic_weighted_kappa",
            detail: "need at least 2 classes".into(),
        });
    }
    let denom_w = ((n - 1) * (n - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom_w;
            let o = cm.get(i, j) as f64 / total;
            let e = (cm.row_sum(i) as f64 / total) * (cm.col_sum(j) as f64 / total);
            num += w * o;
            den += w * e;
        }
    }
    if den == 0.0 {
        return Err(Error::NumericDomain {
            op: "quadratic_weighted_kappa",
            detail: "expected weighted disagreement is zero".into(),
        });
    }
    Ok(1.0 - num / den)
}

/// `acc,f1,kappa` header line plus the integer confusion matrix block.
pub fn write_report<W: Write>(
    mut w: W,
    cm: &ConfusionMatrix,
) -> Result<()> {
    writeln!(w, "acc,f1,kappa")?;
    writeln!(
        w,
        "{:.6},{:.6},{:.6}",
        accuracy(cm)?,
        macro_f1(cm)?,
        quadratic_weighted_kappa(cm)?
    )?;
    for r in 0..cm.n_classes {
        let row: Vec<String> = (0..cm.n_classes)
            .map(|c| cm.get(r, c).to_string())
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_matrix_basics() {
        let cm = ConfusionMatrix::from_labels(&[1, 2], &[1, 2], 2).unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(0, 1), 0);

        let empty = ConfusionMatrix::new(3);
        assert_eq!(empty.total(), 0);
        assert!(accuracy(&empty).is_err());

        let cm = ConfusionMatrix::from_labels(&[1, 1, 2, 3], &[2, 3, 1, 1], 3).unwrap();
        assert_eq!(cm.row_sum(0), 2);
        assert_eq!(cm.row_sum(1), 1);
        assert_eq!(cm.row_sum(2), 1);

        assert!(ConfusionMatrix::from_labels(&[4], &[1], 3).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let cm = ConfusionMatrix::from_labels(&[1, 2, 3], &[1, 2, 3], 3).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_labels(&[1, 2, 3, 4], &[1, 2, 3, 3], 4).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.75);
    }

    #[test]
    fn macro_f1_hand_case() {
        let cm = ConfusionMatrix::from_labels(&[1, 1, 2, 2], &[1, 2, 2, 2], 2).unwrap();
        // per-class F1: 2/3 and 4/5
        assert!((macro_f1(&cm).unwrap() - 0.733333).abs() < 1e-6);

        let cm = ConfusionMatrix::from_labels(&[1, 2], &[1, 2], 2).unwrap();
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);

        // class 3 absent from truths and predictions still divides the mean
        let cm = ConfusionMatrix::from_labels(&[1, 2], &[1, 2], 3).unwrap();
        assert!((macro_f1(&cm).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_hand_cases() {
        let cm = ConfusionMatrix::from_labels(&[1, 2, 3, 4], &[1, 2, 3, 4], 4).unwrap();
        assert_eq!(quadratic_weighted_kappa(&cm).unwrap(), 1.0);

        let cm = ConfusionMatrix::from_labels(&[1, 2, 3, 4], &[1, 2, 3, 3], 4).unwrap();
        assert!((quadratic_weighted_kappa(&cm).unwrap() - 0.875).abs() < 1e-9);

        // constant prediction on uniform truths: chance-level agreement
        let cm = ConfusionMatrix::from_labels(&[1, 2, 3, 4], &[2, 2, 2, 2], 4).unwrap();
        assert!(quadratic_weighted_kappa(&cm).unwrap().abs() < 1e-12);

        // all mass on one agreeing class: undefined
        let cm = ConfusionMatrix::from_labels(&[1, 1], &[1, 1], 4).unwrap();
        assert!(quadratic_weighted_kappa(&cm).is_err());
    }
}
