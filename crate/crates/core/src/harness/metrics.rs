use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Categories present in the gold labels, ascending.
    pub per_category: Vec<CategoryMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro precision, recall and F1 over the categories present in `gold`,
/// plus accuracy.
pub fn compute_metrics(gold: &[usize], predicted: &[usize]) -> Result<MetricsReport> {
    if gold.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    if gold.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let classes: BTreeSet<usize> = gold.iter().copied().collect();
    let mut per_category = Vec::with_capacity(classes.len());
    for &c in &classes {
        let tp = gold.iter().zip(predicted).filter(|(g, p)| **g == c && **p == c).count();
        let support = gold.iter().filter(|g| **g == c).count();
        let predicted_c = predicted.iter().filter(|p| **p == c).count();
        let precision = ratio(tp, predicted_c);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_category.push(CategoryMetrics {
            category: c,
            precision,
            recall,
            f1,
            support,
        });
    }
    let k = per_category.len() as f64;
    let avg = |f: fn(&CategoryMetrics) -> f64| per_category.iter().map(f).sum::<f64>() / k;
    let correct = gold.iter().zip(predicted).filter(|(g, p)| g == p).count();
    Ok(MetricsReport {
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
        accuracy: ratio(correct, gold.len()),
        per_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let g = [0, 1, 2, 1];
        let m = compute_metrics(&g, &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let m = compute_metrics(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_category[1].f1, 0.0);
    }

    #[test]
    fn order_invariant() {
        let g = [0, 1, 2, 2, 1, 0, 3];
        let p = [0, 2, 2, 1, 1, 3, 3];
        let a = compute_metrics(&g, &p).unwrap();
        let mut pairs: Vec<_> = g.iter().zip(&p).map(|(a, b)| (*a, *b)).collect();
        pairs.reverse();
        pairs.rotate_left(3);
        let (g2, p2): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        assert_eq!(a, compute_metrics(&g2, &p2).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
    }
}
