//! Stratified k-fold cross-validation.
//!
//! Rows are first put into a canonical order (label, then feature values,
//! then original index) so that permuting the input rows changes neither the
//! fold assignment nor any training set. Within each class the canonical
//! rows are shuffled with the seed and dealt round-robin into folds.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::XorShift64Star;

use super::{accuracy, check_training, encode_labels, train, MlError, ModelParams};
use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

fn row_cmp(a: &[f64], b: &[f64]) -> core::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(core::cmp::Ordering::Equal)
}

/// Row indices in canonical order.
pub fn canonical_order(x: &[Vec<f64>], y: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| y[a].cmp(&y[b]).then_with(|| row_cmp(&x[a], &x[b])).then(a.cmp(&b)));
    order
}

/// Fold number of every row.
pub fn stratified_folds(x: &[Vec<f64>], y: &[String], k: usize, seed: u64) -> Vec<usize> {
    let (_, yi) = encode_labels(y);
    let order = canonical_order(x, y);
    let mut rng = XorShift64Star::new(seed);
    let mut fold = alloc::vec![0usize; x.len()];
    let mut start = 0;
    while start < order.len() {
        let class = yi[order[start]];
        let end = start + order[start..].iter().take_while(|&&i| yi[i] == class).count();
        let mut members = order[start..end].to_vec();
        rng.shuffle(&mut members);
        for (j, &i) in members.iter().enumerate() {
            fold[i] = j % k;
        }
        start = end;
    }
    fold
}

pub fn cross_validate(
    params: &ModelParams,
    x: &[Vec<f64>],
    y: &[String],
    feature_names: &[String],
    k_folds: usize,
    seed: u64,
) -> Result<CvReport, MlError> {
    check_training(x, y)?;
    if k_folds < 2 || k_folds > x.len() {
        return Err(MlError::Params("need 2 <= k_folds <= rows"));
    }
    let folds = stratified_folds(x, y, k_folds, seed);
    let order = canonical_order(x, y);
    let mut fold_accuracies = Vec::with_capacity(k_folds);
    for f in 0..k_folds {
        let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in &order {
            if folds[i] == f {
                vx.push(x[i].clone());
                vy.push(y[i].clone());
            } else {
                tx.push(x[i].clone());
                ty.push(y[i].clone());
            }
        }
        let model = train(params, &tx, &ty, feature_names)?;
        fold_accuracies.push(accuracy(&model, &vx, &vy));
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k_folds as f64;
    Ok(CvReport { fold_accuracies, mean_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn folds_are_stratified() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let y: Vec<String> = (0..30).map(|i| if i < 20 { "a" } else { "b" }.to_string()).collect();
        let folds = stratified_folds(&x, &y, 5, 7);
        for f in 0..5 {
            let a = (0..20).filter(|&i| folds[i] == f).count();
            let b = (20..30).filter(|&i| folds[i] == f).count();
            assert_eq!((a, b), (4, 2));
        }
    }
}
