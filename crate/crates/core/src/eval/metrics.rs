//! Accuracy summaries.

use std::collections::HashSet;

/// Area under the cumulative error curve up to each threshold, normalised
/// to `[0, 1]`. Errors are sorted and paired with recalls `1/n, 2/n, …`
/// after a leading `(0, 0)`; the curve is cut at the threshold (holding the
/// last recall) and integrated with the trapezoid rule. Non-finite errors
/// count as failures.
pub fn compute_auc(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let n = errors.len();
    let mut e: Vec<f64> = errors.iter().map(|&x| if x.is_nan() { f64::INFINITY } else { x }).collect();
    e.sort_by(f64::total_cmp);
    let mut xs = Vec::with_capacity(n + 1);
    let mut rs = Vec::with_capacity(n + 1);
    xs.push(0.0);
    rs.push(0.0);
    for (i, &v) in e.iter().enumerate() {
        xs.push(v);
        rs.push((i + 1) as f64 / n.max(1) as f64);
    }
    thresholds
        .iter()
        .map(|&t| {
            if n == 0 || !(t > 0.0) {
                return 0.0;
            }
            let last = xs.partition_point(|&x| x < t);
            let mut area = 0.0;
            for k in 1..last {
                area += (xs[k] - xs[k - 1]) * (rs[k] + rs[k - 1]) / 2.0;
            }
            area += (t - xs[last - 1]) * rs[last - 1];
            area / t
        })
        .collect()
}

/// Median of the finite values, `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// `(precision, recall)` of predicted pairs against ground truth. An empty
/// prediction has precision 1 and an empty ground truth recall 1.
pub fn precision_recall(predicted: &[(usize, usize)], truth: &[(usize, usize)]) -> (f64, f64) {
    let gt: HashSet<(usize, usize)> = truth.iter().copied().collect();
    let hits = predicted.iter().filter(|p| gt.contains(p)).count() as f64;
    let precision = if predicted.is_empty() { 1.0 } else { hits / predicted.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { hits / truth.len() as f64 };
    (precision, recall)
}
