//! Overall accuracy, Cohen's kappa, class-averaged F1 and the confusion
//! matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, N_CATEGORIES};

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CATEGORIES]; N_CATEGORIES],
}

/// Which classes the macro F1 averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Scope {
    /// Classes occurring in the truth or the predictions.
    Present,
    /// All nine classes; absent ones count as F1 = 0.
    All,
}

impl std::str::FromStr for F1Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "present" => Ok(F1Scope::Present),
            "all" => Ok(F1Scope::All),
            other => Err(Error::Invalid(format!("unknown F1 scope {other:?}"))),
        }
    }
}

impl ConfusionMatrix {
    pub fn from_labels(y_true: &[Category], y_pred: &[Category]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Invalid(format!("{} true labels but {} predictions", y_true.len(), y_pred.len())));
        }
        if y_true.is_empty() {
            return Err(Error::Invalid("nothing to evaluate".into()));
        }
        let mut counts = [[0u64; N_CATEGORIES]; N_CATEGORIES];
        for (t, p) in y_true.iter().zip(y_pred) {
            counts[t.index()][p.index()] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N_CATEGORIES).map(|i| self.counts[i][i]).sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Cohen's kappa. Perfect agreement scores 1, including the single-class
    /// case where chance agreement is also 1.
    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        let p_o = self.trace() as f64 / n;
        if self.trace() == self.total() {
            return 1.0;
        }
        let p_e = (0..N_CATEGORIES).map(|c| self.row_sum(c) as f64 * self.col_sum(c) as f64).sum::<f64>() / (n * n);
        if p_e == 1.0 {
            return 0.0;
        }
        (p_o - p_e) / (1.0 - p_e)
    }

    /// Per-class F1; 0 when precision + recall is 0.
    pub fn per_class_f1(&self) -> [f64; N_CATEGORIES] {
        let mut f1 = [0.0; N_CATEGORIES];
        for (c, out) in f1.iter_mut().enumerate() {
            let tp = self.counts[c][c] as f64;
            let (pred, truth) = (self.col_sum(c) as f64, self.row_sum(c) as f64);
            let precision = if pred > 0.0 { tp / pred } else { 0.0 };
            let recall = if truth > 0.0 { tp / truth } else { 0.0 };
            if precision + recall > 0.0 {
                *out = 2.0 * precision * recall / (precision + recall);
            }
        }
        f1
    }

    pub fn is_present(&self, c: usize) -> bool {
        self.row_sum(c) > 0 || self.col_sum(c) > 0
    }

    /// Renders an aligned text table with true classes as rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>6}", "true\\pred");
        for c in Category::ALL {
            let _ = write!(out, " {:>6}", c.name());
        }
        out.push('\n');
        for (i, c) in Category::ALL.iter().enumerate() {
            let _ = write!(out, "{:>9}", c.name());
            for j in 0..N_CATEGORIES {
                let _ = write!(out, " {:>6}", self.counts[i][j]);
            }
            out.push('\n');
        }
        out
    }
}

pub fn macro_f1_scope(matrix: &ConfusionMatrix, scope: F1Scope) -> Result<f64> {
    let f1 = matrix.per_class_f1();
    match scope {
        F1Scope::All => Ok(f1.iter().sum::<f64>() / N_CATEGORIES as f64),
        F1Scope::Present => {
            let present: Vec<f64> = (0..N_CATEGORIES).filter(|&c| matrix.is_present(c)).map(|c| f1[c]).collect();
            if present.is_empty() {
                return Err(Error::Invalid("no classes present".into()));
            }
            Ok(present.iter().sum::<f64>() / present.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: u64,
    pub accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    pub f1_scope: F1Scope,
    pub per_class_f1: [f64; N_CATEGORIES],
    pub confusion: ConfusionMatrix,
}

pub fn evaluate_with_scope(y_true: &[Category], y_pred: &[Category], scope: F1Scope) -> Result<Evaluation> {
    let confusion = ConfusionMatrix::from_labels(y_true, y_pred)?;
    Ok(Evaluation {
        n: confusion.total(),
        accuracy: confusion.accuracy(),
        kappa: confusion.kappa(),
        macro_f1: macro_f1_scope(&confusion, scope)?,
        f1_scope: scope,
        per_class_f1: confusion.per_class_f1(),
        confusion,
    })
}

/// Accuracy, kappa and macro F1 over present classes.
pub fn evaluate(y_true: &[Category], y_pred: &[Category]) -> Result<Evaluation> {
    evaluate_with_scope(y_true, y_pred, F1Scope::Present)
}
