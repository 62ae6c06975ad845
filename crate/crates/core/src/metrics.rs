//! Confusion matrices and F1 scores.

use std::fmt::Write as _;
use std::io::Write;

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Counts indexed `[gold][predicted]` over an ordered class list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<Label>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: Vec<Label>, counts: Vec<Vec<u64>>) -> Result<ConfusionMatrix> {
        if counts.len() != classes.len() || counts.iter().any(|r| r.len() != classes.len()) {
            return Err(Error::ShapeMismatch(format!(
                "confusion matrix must be {0}x{0}",
                classes.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

/// Confusion matrix over `classes`.
pub fn confusion(golds: &[Label], preds: &[Label], classes: &[Label]) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(Error::LengthMismatch {
            left: golds.len(),
            right: preds.len(),
        });
    }
    let idx = |l: &Label| classes.iter().position(|c| c == l).ok_or(Error::ClassNotInList(*l));
    let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
    for (g, p) in golds.iter().zip(preds) {
        counts[idx(g)?][idx(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
    })
}

/// `2PR/(P+R)` per class, defined as 0 when precision or recall is undefined
/// or both are 0.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes.len())
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let (pred, gold) = (cm.predicted(c) as f64, cm.support(c) as f64);
            if tp == 0.0 || pred == 0.0 || gold == 0.0 {
                return 0.0;
            }
            let (p, r) = (tp / pred, tp / gold);
            2.0 * p * r / (p + r)
        })
        .collect()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptySelection);
    }
    Ok(per_class_f1(cm)
        .iter()
        .enumerate()
        .map(|(c, f)| f * cm.support(c) as f64)
        .sum::<f64>()
        / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub classes: Vec<Label>,
    pub per_class: Vec<f64>,
    pub final_score: f64,
}

pub fn f1_report(cm: &ConfusionMatrix) -> Result<F1Report> {
    Ok(F1Report {
        classes: cm.classes.clone(),
        per_class: per_class_f1(cm),
        final_score: weighted_f1(cm)?,
    })
}

impl F1Report {
    /// `class,f1` rows followed by a `final` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "class,f1")?;
        for (c, f) in self.classes.iter().zip(&self.per_class) {
            writeln!(w, "{},{f}", c.name())?;
        }
        writeln!(w, "final,{}", self.final_score)
    }

    /// One column per class plus a final column, four decimals.
    pub fn to_table(&self) -> String {
        let mut names: Vec<String> = self.classes.iter().map(|c| c.name().to_string()).collect();
        names.push("Final".into());
        let mut values: Vec<f64> = self.per_class.clone();
        values.push(self.final_score);
        let widths: Vec<usize> = names.iter().map(|n| n.len().max(6)).collect();
        let mut out = String::new();
        let cells: Vec<String> = names.iter().zip(&widths).map(|(n, w)| format!("{n:>w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  "));
        let cells: Vec<String> = values.iter().zip(&widths).map(|(v, w)| format!("{v:>w$.4}")).collect();
        let _ = writeln!(out, "{}", cells.join("  "));
        out
    }
}
