//! Confusion counts and the classification metrics derived from them.
//!
//! Per class, with one-vs-rest counts:
//!
//! ```text
//! accuracy  = correct / total
//! precision = TP / (TP + FP)
//! recall    = TP / (TP + FN)
//! F1        = 2 · precision · recall / (precision + recall)
//! ```
//!
//! Any zero denominator yields 0. Macro averages take the unweighted mean
//! over classes that occur in the truth or in the predictions; weighted
//! averages weight each class by its support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-vs-rest tallies of a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// `matrix[truth][predicted]`
    pub matrix: Vec<Vec<u64>>,
    pub per_class: Vec<BinaryCounts>,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn from_matrix(matrix: Vec<Vec<u64>>) -> Result<Self> {
        let k = matrix.len();
        if k == 0 || matrix.iter().any(|row| row.len() != k) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        let total: u64 = matrix.iter().flatten().sum();
        let per_class = (0..k)
            .map(|c| {
                let tp = matrix[c][c];
                let row: u64 = matrix[c].iter().sum();
                let col: u64 = matrix.iter().map(|r| r[c]).sum();
                BinaryCounts {
                    tp,
                    fp: col - tp,
                    fn_: row - tp,
                    tn: total + tp - row - col,
                }
            })
            .collect();
        Ok(ConfusionCounts {
            matrix,
            per_class,
            total,
        })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty dataset"));
        }
        let mut matrix = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::invalid(format!(
                    "class index out of range: truth {t}, predicted {p}"
                )));
            }
            matrix[t][p] += 1;
        }
        Self::from_matrix(matrix)
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.len()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.matrix[c][c]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.matrix[class].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: BinaryCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// Classes entering the macro averages.
    pub classes_averaged: usize,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn from_counts(counts: &ConfusionCounts, class_names: &[String]) -> Self {
        let per_class: Vec<ClassMetrics> = counts
            .per_class
            .iter()
            .enumerate()
            .map(|(c, b)| ClassMetrics {
                class: c,
                name: class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                support: counts.support(c),
                precision: b.precision(),
                recall: b.recall(),
                f1: b.f1(),
                counts: *b,
            })
            .collect();
        let present: Vec<&ClassMetrics> = per_class
            .iter()
            .filter(|m| m.counts.tp + m.counts.fn_ + m.counts.fp > 0)
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
            }
        };
        let weighted = |f: fn(&ClassMetrics) -> f64| {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / counts.total as f64
        };
        MetricReport {
            total: counts.total,
            correct: counts.correct(),
            accuracy: ratio(counts.correct(), counts.total),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            weighted_precision: weighted(|m| m.precision),
            weighted_recall: weighted(|m| m.recall),
            weighted_f1: weighted(|m| m.f1),
            classes_averaged: present.len(),
            per_class,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_example() {
        let b = BinaryCounts {
            tp: 8,
            fp: 2,
            fn_: 4,
            tn: 6,
        };
        assert_eq!(b.accuracy(), 0.70);
        assert_eq!(b.precision(), 0.80);
        assert!((b.recall() - 0.6667).abs() < 5e-5);
        assert!((b.f1() - 0.7273).abs() < 5e-5);
    }

    #[test]
    fn perfect_predictor() {
        let truth = [0, 1, 2, 2, 1, 0, 0];
        let c = ConfusionCounts::from_predictions(3, &truth, &truth).unwrap();
        let r = MetricReport::from_counts(&c, &[]);
        for v in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1, r.weighted_f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn unpredicted_class_gets_zero_precision() {
        let c = ConfusionCounts::from_predictions(3, &[0, 1, 1], &[0, 0, 0]).unwrap();
        let r = MetricReport::from_counts(&c, &[]);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
        // Class 2 never occurs, so only classes 0 and 1 are averaged.
        assert_eq!(r.classes_averaged, 2);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(ConfusionCounts::from_predictions(3, &[], &[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn count_invariants(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let c = ConfusionCounts::from_predictions(5, &t, &p).unwrap();
            let r = MetricReport::from_counts(&c, &[]);
            proptest::prop_assert_eq!(c.matrix.iter().flatten().sum::<u64>(), t.len() as u64);
            for b in &c.per_class {
                proptest::prop_assert_eq!(b.total(), c.total);
            }
            proptest::prop_assert_eq!(r.accuracy, c.correct() as f64 / c.total as f64);
            for m in &r.per_class {
                for v in [m.precision, m.recall, m.f1] {
                    proptest::prop_assert!((0.0..=1.0).contains(&v));
                }
                if m.precision + m.recall > 0.0 {
                    proptest::prop_assert_eq!(m.f1, 2.0 * m.precision * m.recall / (m.precision + m.recall));
                }
            }
        }
    }
}
