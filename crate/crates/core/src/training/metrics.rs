use ndarray::Array2;

use crate::chem::TaskType;
use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from sorted ranks in `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateTask { task: 0 });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept integral so ties stay exact.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok((twice_u as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Root mean squared error over entries whose mask is set.
pub fn rmse(predictions: &[f64], targets: &[f64], mask: &[bool]) -> Result<f64> {
    assert_eq!(predictions.len(), targets.len());
    assert_eq!(predictions.len(), mask.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, y), &m) in predictions.iter().zip(targets).zip(mask) {
        if m {
            sum += (p - y) * (p - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

/// Dataset-level metric: mean per-task ROC-AUC over tasks with both
/// classes present, or pooled RMSE over every valid label.
pub fn task_metric(
    predictions: &Array2<f64>,
    labels: &Array2<f64>,
    mask: &Array2<f64>,
    task_type: TaskType,
) -> Result<f64> {
    match task_type {
        TaskType::Regression => {
            let p: Vec<f64> = predictions.iter().copied().collect();
            let y: Vec<f64> = labels.iter().copied().collect();
            let m: Vec<bool> = mask.iter().map(|&v| v > 0.0).collect();
            rmse(&p, &y, &m)
        }
        TaskType::Classification => {
            let mut aucs = Vec::new();
            for k in 0..labels.ncols() {
                let mut s = Vec::new();
                let mut l = Vec::new();
                for i in 0..labels.nrows() {
                    if mask[[i, k]] > 0.0 {
                        s.push(predictions[[i, k]]);
                        l.push(labels[[i, k]] > 0.5);
                    }
                }
                match roc_auc(&s, &l) {
                    Ok(a) => aucs.push(a),
                    Err(_) => log::warn!("task {k}: valid labels hold a single class; skipped"),
                }
            }
            if aucs.is_empty() {
                return Err(Error::DegenerateTask { task: 0 });
            }
            Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    }
}

/// Whether metric `a` is better than `b` for this task type.
pub fn better(task_type: TaskType, a: f64, b: f64) -> bool {
    match task_type {
        TaskType::Classification => a > b,
        TaskType::Regression => a < b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.1, 0.6, 0.4, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateTask { .. })));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(rmse(&[2.0, 3.0], &[1.0, 2.0], &[true, true]).unwrap(), 1.0);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0], &[true, true]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&[9.0, 1.0], &[0.0, 1.0], &[false, true]).unwrap(), 0.0);
        assert!(matches!(rmse(&[1.0], &[0.0], &[false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn degenerate_tasks_are_skipped() {
        let p = ndarray::array![[0.1, 0.2], [0.9, 0.3]];
        let y = ndarray::array![[0.0, 1.0], [1.0, 1.0]];
        let m = Array2::ones((2, 2));
        assert_eq!(task_metric(&p, &y, &m, TaskType::Classification).unwrap(), 1.0);
        let y1 = ndarray::array![[1.0, 1.0], [1.0, 1.0]];
        assert!(task_metric(&p, &y1, &m, TaskType::Classification).is_err());
    }
}
