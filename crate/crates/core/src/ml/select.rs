//! Feature ranking by random-forest mean decrease in impurity.

use alloc::string::String;
use alloc::vec::Vec;

use super::{check_training, encode_labels, generic_names, train, ForestParams, MlError, ModelParams};

/// Indices of the `k` most important features, most important first; equal
/// importances keep ascending index order.
pub fn select_features(x: &[Vec<f64>], y: &[String], k: usize, params: &ForestParams) -> Result<Vec<usize>, MlError> {
    let d = check_training(x, y)?;
    if k > d {
        return Err(MlError::Params("k exceeds the feature count"));
    }
    if encode_labels(y).0.len() < 2 {
        return Err(MlError::SingleClass);
    }
    let model = train(&ModelParams::Rf(params.clone()), x, y, &generic_names(d))?;
    Ok(rank(&model.importance, k))
}

pub fn rank(importance: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..importance.len()).collect();
    idx.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
