//! Multi-class evaluation: macro F1, balanced accuracy, one-vs-rest AUC,
//! confusion matrices and fold aggregation.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    pub num_classes: usize,
    pub y_true: Vec<usize>,
    pub y_prob: Vec<Vec<f64>>,
    pub y_pred: Vec<usize>,
}

impl EvalBatch {
    pub fn new(y_true: Vec<usize>, y_prob: Vec<Vec<f64>>, num_classes: usize) -> Result<Self> {
        if y_true.len() != y_prob.len() {
            return Err(Error::invalid(format!(
                "{} labels but {} probability rows",
                y_true.len(),
                y_prob.len()
            )));
        }
        if let Some(row) = y_prob.iter().find(|r| r.len() != num_classes) {
            return Err(Error::invalid(format!(
                "probability row of width {} for {num_classes} classes",
                row.len()
            )));
        }
        let y_pred = y_prob.iter().map(|r| argmax(r)).collect();
        Self::checked(y_true, y_prob, y_pred, num_classes)
    }

    /// Hard predictions only; probabilities become one-hot rows.
    pub fn from_predictions(y_true: Vec<usize>, y_pred: Vec<usize>, num_classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::invalid("y_true and y_pred differ in length"));
        }
        let y_prob = y_pred
            .iter()
            .map(|&p| (0..num_classes).map(|k| if k == p { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::checked(y_true, y_prob, y_pred, num_classes)
    }

    fn checked(
        y_true: Vec<usize>,
        y_prob: Vec<Vec<f64>>,
        y_pred: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        for (what, v) in [("label", &y_true), ("prediction", &y_pred)] {
            if let Some(&bad) = v.iter().find(|&&y| y >= num_classes) {
                return Err(Error::OutOfRange {
                    what,
                    index: bad,
                    size: num_classes,
                });
            }
        }
        Ok(Self {
            num_classes,
            y_true,
            y_prob,
            y_pred,
        })
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }
}

/// `m[t][p]` counts examples of true class `t` predicted as `p`.
pub fn confusion_matrix(batch: &EvalBatch) -> Vec<Vec<usize>> {
    let k = batch.num_classes;
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in batch.y_true.iter().zip(&batch.y_pred) {
        m[t][p] += 1;
    }
    m
}

/// Per-class F1 from the confusion matrix. A class that is never true and
/// never predicted scores 0.
pub fn per_class_f1(batch: &EvalBatch) -> Vec<f64> {
    let m = confusion_matrix(batch);
    let k = batch.num_classes;
    (0..k)
        .map(|c| {
            let tp = m[c][c];
            let fp: usize = (0..k).filter(|&t| t != c).map(|t| m[t][c]).sum();
            let fn_: usize = (0..k).filter(|&p| p != c).map(|p| m[c][p]).sum();
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                warn!("class {c} is absent from labels and predictions; F1 counted as 0");
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

pub fn macro_f1(batch: &EvalBatch) -> f64 {
    mean(&per_class_f1(batch))
}

/// Per-class recall. A class with no true examples scores 0.
pub fn per_class_recall(batch: &EvalBatch) -> Vec<f64> {
    let m = confusion_matrix(batch);
    (0..batch.num_classes)
        .map(|c| {
            let support: usize = m[c].iter().sum();
            if support == 0 {
                warn!("class {c} has no true examples; recall counted as 0");
                0.0
            } else {
                m[c][c] as f64 / support as f64
            }
        })
        .collect()
}

/// Balanced accuracy: unweighted mean of per-class recall.
pub fn macro_accuracy(batch: &EvalBatch) -> f64 {
    mean(&per_class_recall(batch))
}

pub fn accuracy(batch: &EvalBatch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let hits = batch.y_true.iter().zip(&batch.y_pred).filter(|(t, p)| t == p).count();
    hits as f64 / batch.len() as f64
}

/// Mann-Whitney AUC of `scores` for `positive` vs the rest, ties counted
/// one half. `None` unless both groups are non-empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of positive ranks, averaging ranks inside tie groups
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&o| positive[o]).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro one-vs-rest AUC over classes that have both positives and
/// negatives in the batch.
pub fn auc_ovr(batch: &EvalBatch) -> Option<f64> {
    let aucs: Vec<f64> = (0..batch.num_classes)
        .filter_map(|c| {
            let scores: Vec<f64> = batch.y_prob.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = batch.y_true.iter().map(|&y| y == c).collect();
            binary_auc(&scores, &pos)
        })
        .collect();
    if aucs.is_empty() {
        warn!("AUC undefined: no class has both positive and negative examples");
        None
    } else {
        Some(mean(&aucs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub auc_ovr: Option<f64>,
    pub macro_acc: f64,
    pub macro_f1: f64,
    /// Plain accuracy, reported next to the balanced one.
    pub accuracy: f64,
}

pub fn evaluate(batch: &EvalBatch) -> MetricTriple {
    MetricTriple {
        auc_ovr: auc_ovr(batch),
        macro_acc: macro_accuracy(batch),
        macro_f1: macro_f1(batch),
        accuracy: accuracy(batch),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub sd: Option<f64>,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let m = mean(values);
        let sd = (values.len() > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
            (ss / (values.len() - 1) as f64).sqrt()
        });
        Some(Self {
            mean: m,
            sd,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc_ovr: Option<Summary>,
    /// Folds whose AUC was undefined and left out of `auc_ovr`.
    pub auc_absent: usize,
    pub macro_acc: Summary,
    pub macro_f1: Summary,
    pub accuracy: Summary,
}

pub fn aggregate(folds: &[MetricTriple]) -> Result<Aggregate> {
    if folds.is_empty() {
        return Err(Error::invalid("cannot aggregate zero folds"));
    }
    let pick = |f: fn(&MetricTriple) -> f64| {
        Summary::of(&folds.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
    };
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc_ovr).collect();
    Ok(Aggregate {
        auc_ovr: Summary::of(&aucs),
        auc_absent: folds.len() - aucs.len(),
        macro_acc: pick(|f| f.macro_acc),
        macro_f1: pick(|f| f.macro_f1),
        accuracy: pick(|f| f.accuracy),
    })
}

/// `0.82222` -> `"82.22"`.
pub fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example() -> EvalBatch {
        EvalBatch::from_predictions(vec![0, 0, 1, 1, 2, 2], vec![0, 0, 1, 2, 2, 2], 3).unwrap()
    }

    #[test]
    fn worked_examples() {
        let b = example();
        assert!((macro_f1(&b) - (1.0 + 2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-15);
        assert!((macro_accuracy(&b) - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(binary_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
    }

    #[test]
    fn perfect_and_constant() {
        let b = EvalBatch::from_predictions(vec![0, 1, 2], vec![0, 1, 2], 3).unwrap();
        assert_eq!(macro_f1(&b), 1.0);
        assert_eq!(macro_accuracy(&b), 1.0);
        let b = EvalBatch::from_predictions(vec![0, 1, 2, 0, 1, 2], vec![1; 6], 3).unwrap();
        assert!((macro_accuracy(&b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_policy() {
        let b = EvalBatch::from_predictions(vec![1, 1], vec![1, 1], 3).unwrap();
        assert_eq!(per_class_f1(&b), vec![0.0, 1.0, 0.0]);
        assert!(auc_ovr(&b).is_none());
    }

    #[test]
    fn ties_give_one_half() {
        assert_eq!(binary_auc(&[0.3; 5], &[true, false, true, false, false]), Some(0.5));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
    }

    #[test]
    fn aggregate_examples() {
        let t = |x: f64| MetricTriple {
            auc_ovr: None,
            macro_acc: x,
            macro_f1: x,
            accuracy: x,
        };
        let a = aggregate(&[t(0.8), t(0.9)]).unwrap();
        assert!((a.macro_f1.mean - 0.85).abs() < 1e-15);
        assert!((a.macro_f1.sd.unwrap() - 0.070710678).abs() < 1e-8);
        assert_eq!(a.auc_absent, 2);
        assert!(a.auc_ovr.is_none());
        assert!(aggregate(&[t(0.7)]).unwrap().macro_acc.sd.is_none());
        assert_eq!(aggregate(&[t(0.7), t(0.7)]).unwrap().macro_acc.sd, Some(0.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn percent_format() {
        assert_eq!(percent(0.822222), "82.22");
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(EvalBatch::new(vec![0], vec![], 2).is_err());
        assert!(EvalBatch::new(vec![3], vec![vec![0.5, 0.5]], 2).is_err());
    }

    fn random_batch(rng: &mut ChaCha8Rng) -> EvalBatch {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(2..=5);
        let y_true = (0..n).map(|_| rng.random_range(0..k)).collect();
        let y_prob = (0..n)
            .map(|_| {
                // coarse values so ties are common
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0..5) as f64 + 0.1).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|r| r / s).collect()
            })
            .collect();
        EvalBatch::new(y_true, y_prob, k).unwrap()
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let b = random_batch(&mut rng);
            let mut idx: Vec<usize> = (0..b.len()).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let p = EvalBatch::new(
                idx.iter().map(|&i| b.y_true[i]).collect(),
                idx.iter().map(|&i| b.y_prob[i].clone()).collect(),
                b.num_classes,
            )
            .unwrap();
            assert!((macro_f1(&b) - macro_f1(&p)).abs() < 1e-12);
            assert!((macro_accuracy(&b) - macro_accuracy(&p)).abs() < 1e-12);
            match (auc_ovr(&b), auc_ovr(&p)) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (x, y) => assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn auc_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.random_range(2..=50);
            // exact, well-separated values so the transform cannot merge them
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.125).collect();
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            assert_eq!(binary_auc(&s, &pos), binary_auc(&t, &pos));
        }
    }
}
