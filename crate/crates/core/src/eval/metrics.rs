//! Confusion matrices and macro-averaged F1 over the three stance classes.

use serde::{Deserialize, Serialize};

use crate::domain::StanceLabel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Counts indexed `[gold][predicted]`, classes ordered Support, Neutral, Oppose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[StanceLabel], gold: &[StanceLabel]) -> Result<ConfusionMatrix> {
        if preds.len() != gold.len() {
            return Err(Error::LengthMismatch {
                left: preds.len(),
                right: gold.len(),
            });
        }
        if preds.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut m = ConfusionMatrix::default();
        for (p, g) in preds.iter().zip(gold) {
            m.counts[g.index()][p.index()] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn class_metrics<S: Scalar>(&self, class: StanceLabel) -> ClassMetrics<S> {
        let c = class.index();
        let tp = self.counts[c][c];
        let predicted: u64 = (0..3).map(|g| self.counts[g][c]).sum();
        let actual: u64 = self.counts[c].iter().sum();
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                S::zero()
            } else {
                S::from_count(num as usize) / S::from_count(den as usize)
            }
        };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let two = S::one() + S::one();
        let f1 = if precision + recall == S::zero() {
            S::zero()
        } else {
            two * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support: actual,
        }
    }

    /// Unweighted mean of the three per-class F1 scores.
    pub fn macro_f1<S: Scalar>(&self) -> S {
        let sum = StanceLabel::ALL
            .iter()
            .fold(S::zero(), |acc, c| acc + self.class_metrics::<S>(*c).f1);
        sum / S::from_count(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<S> {
    pub precision: S,
    pub recall: S,
    pub f1: S,
    pub support: u64,
}

/// Macro F1 over {Support, Neutral, Oppose}. A class absent from both gold
/// and predictions contributes 0.
pub fn macro_f1<S: Scalar>(preds: &[StanceLabel], gold: &[StanceLabel]) -> Result<S> {
    Ok(ConfusionMatrix::from_pairs(preds, gold)?.macro_f1())
}
