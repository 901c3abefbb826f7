//! Classifier evaluation: accuracy, macro one-vs-rest AUROC via the
//! trapezoidal rule over score thresholds, and per-class confusion metrics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

use super::classifier::SequenceClassifier;
use super::clip::SequenceClip;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent correct.
    pub accuracy: f64,
    /// Macro average of one-vs-rest ROC areas.
    pub auroc_macro: f64,
    pub per_class: Vec<ClassMetrics>,
    /// confusion[true][predicted].
    pub confusion: Vec<Vec<usize>>,
    pub seed: u64,
    pub paradigm: String,
}

/// Area under the ROC curve for binary scores, by the trapezoidal rule with
/// threshold grouping (ties contribute half). Requires at least one positive
/// and one negative.
pub fn auroc_binary(scores: &[(f64, bool)]) -> Result<f64> {
    let positives = scores.iter().filter(|(_, y)| *y).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::input("AUROC undefined without both classes"));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    let mut area = 0.0f64;
    let mut i = 0usize;
    while i < sorted.len() {
        // Consume the whole tie group at this threshold.
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid between the previous and current ROC points.
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(area / (positives as f64 * negatives as f64))
}

/// Evaluate per-clip probability scores against true labels.
pub fn evaluate_scores(
    scores: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    seed: u64,
    paradigm: &str,
) -> Result<EvalReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::input("evaluation requires matching non-empty scores and labels"));
    }
    let present: std::collections::BTreeSet<usize> = labels.iter().cloned().collect();
    if present.len() < 2 {
        return Err(Error::input("AUROC undefined on a single-class test set"));
    }

    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut correct = 0usize;
    for (s, &y) in scores.iter().zip(labels) {
        let pred = s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        confusion[y][pred] += 1;
        if pred == y {
            correct += 1;
        }
    }
    let total = labels.len();
    let accuracy = 100.0 * correct as f64 / total as f64;

    // Macro one-vs-rest AUROC over classes present in the test set.
    let mut auroc_sum = 0.0f64;
    let mut auroc_classes = 0usize;
    for class in 0..num_classes {
        let binary: Vec<(f64, bool)> =
            scores.iter().zip(labels).map(|(s, &y)| (s[class], y == class)).collect();
        match auroc_binary(&binary) {
            Ok(a) => {
                auroc_sum += a;
                auroc_classes += 1;
            }
            Err(_) => continue, // class absent from the test set
        }
    }
    if auroc_classes == 0 {
        return Err(Error::input("AUROC undefined for every class"));
    }
    let auroc_macro = auroc_sum / auroc_classes as f64;

    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let tp = confusion[class][class];
        let fn_: usize = (0..num_classes).filter(|&p| p != class).map(|p| confusion[class][p]).sum();
        let fp: usize = (0..num_classes).filter(|&t| t != class).map(|t| confusion[t][class]).sum();
        let tn = total - tp - fn_ - fp;
        let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let sensitivity = rate(tp, tp + fn_);
        let specificity = rate(tn, tn + fp);
        let precision = rate(tp, tp + fp);
        let f1 = if precision + sensitivity == 0.0 {
            0.0
        } else {
            2.0 * precision * sensitivity / (precision + sensitivity)
        };
        per_class.push(ClassMetrics { sensitivity, specificity, precision, f1 });
    }

    Ok(EvalReport {
        accuracy,
        auroc_macro,
        per_class,
        confusion,
        seed,
        paradigm: paradigm.to_string(),
    })
}

/// Evaluate a trained classifier on a test set.
pub fn evaluate(
    classifier: &SequenceClassifier,
    test: &[SequenceClip],
    seed: u64,
    paradigm: &str,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    let num_classes = classifier.config.num_classes;
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for clip in test {
        scores.push(classifier.predict_proba(clip)?);
        labels.push(clip.class_id);
    }
    evaluate_scores(&scores, &labels, num_classes, seed, paradigm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    /// Exhaustive pair-counting oracle: P(score+ > score-) with 1/2 for ties.
    pub(crate) fn auroc_pairs(scores: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = scores.iter().filter(|(_, y)| *y).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().filter(|(_, y)| !*y).map(|(s, _)| *s).collect();
        let mut acc = 0.0;
        for &p in &pos {
            for &n in &neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_perfect_and_chance() {
        let perfect = [(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert!((auroc_binary(&perfect).unwrap() - 1.0).abs() < 1e-12);
        let constant = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert!((auroc_binary(&constant).unwrap() - 0.5).abs() < 1e-12);
        let inverted = [(0.1, true), (0.9, false)];
        assert!((auroc_binary(&inverted).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_six_sample_fixture_is_three_quarters() {
        // 2 positives, 4 negatives; 6 of 8 pairs won.
        let fixture = [
            (0.9, true),
            (0.5, true),
            (0.7, false),
            (0.6, false),
            (0.3, false),
            (0.1, false),
        ];
        assert!((auroc_binary(&fixture).unwrap() - 0.75).abs() < 1e-12);
        assert!((auroc_pairs(&fixture) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_matches_pair_counting_with_ties() {
        let mut rng = RngState::new(31, 1).rng();
        for case in 0..200 {
            let n = 4 + rng.below(12);
            let scores: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    // Half the cases draw from a coarse grid to force ties.
                    let s = if case % 2 == 0 {
                        (rng.below(5) as f64) / 4.0
                    } else {
                        rng.uniform()
                    };
                    (s, rng.coin(0.5))
                })
                .collect();
            let pos = scores.iter().filter(|(_, y)| *y).count();
            if pos == 0 || pos == scores.len() {
                continue;
            }
            let a = auroc_binary(&scores).unwrap();
            let b = auroc_pairs(&scores);
            assert!((a - b).abs() < 1e-9, "case {case}: {a} vs {b}");
        }
    }

    #[test]
    fn evaluate_scores_basics() {
        // Perfect separation on 2 classes.
        let scores = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.2, 0.8],
            vec![0.3, 0.7],
        ];
        let labels = vec![0, 0, 1, 1];
        let report = evaluate_scores(&scores, &labels, 2, 0, "baseline").unwrap();
        assert_eq!(report.accuracy, 100.0);
        assert!((report.auroc_macro - 1.0).abs() < 1e-12);
        assert_eq!(report.confusion, vec![vec![2, 0], vec![0, 2]]);
        for m in &report.per_class {
            assert_eq!(m.f1, 1.0);
        }
    }

    #[test]
    fn evaluate_scores_consistency_invariants() {
        let mut rng = RngState::new(33, 1).rng();
        let n = 40;
        let k = 3;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let mut s: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-9).collect();
            let sum: f64 = s.iter().sum();
            s.iter_mut().for_each(|v| *v /= sum);
            scores.push(s);
            labels.push(rng.below(k));
        }
        let report = evaluate_scores(&scores, &labels, k, 1, "x").unwrap();
        // Accuracy equals trace / total.
        let trace: usize = (0..k).map(|c| report.confusion[c][c]).sum();
        assert!((report.accuracy - 100.0 * trace as f64 / n as f64).abs() < 1e-9);
        // Row sums equal per-class counts.
        for c in 0..k {
            let row: usize = report.confusion[c].iter().sum();
            assert_eq!(row, labels.iter().filter(|&&y| y == c).count());
        }
        // F1 recomputable from precision and sensitivity.
        for m in &report.per_class {
            let f1 = if m.precision + m.sensitivity == 0.0 {
                0.0
            } else {
                2.0 * m.precision * m.sensitivity / (m.precision + m.sensitivity)
            };
            assert!((m.f1 - f1).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_test_set_errors() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2]];
        let labels = vec![0, 0];
        assert!(evaluate_scores(&scores, &labels, 2, 0, "x").is_err());
    }
}
