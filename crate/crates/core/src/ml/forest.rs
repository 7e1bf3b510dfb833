//! Bagged random forests of CART trees.

use alloc::vec::Vec;

use crate::rng::XorShift64Star;

use super::tree::{grow, GrowParams, TrainingData, Tree};

/// Default per-split feature subsample: floor(sqrt(d)).
pub fn default_features_per_split(d: usize) -> usize {
    libm::floor(libm::sqrt(d as f64)).max(1.0) as usize
}

pub(crate) struct ForestFit {
    pub trees: Vec<Tree>,
    /// Mean over trees of each tree's normalized impurity decrease.
    pub importance: Vec<f64>,
}

pub(crate) fn fit_forest(
    data: &TrainingData<'_>,
    n_trees: usize,
    bootstrap: bool,
    params: GrowParams,
    seed: u64,
) -> ForestFit {
    let n = data.x.len();
    let d = data.x[0].len();
    let mut rng = XorShift64Star::new(seed);
    let mut trees = Vec::with_capacity(n_trees);
    let mut importance = alloc::vec![0.0; d];
    let mut tree_imp = alloc::vec![0.0; d];
    for _ in 0..n_trees {
        let sample: Vec<usize> = if bootstrap { (0..n).map(|_| rng.below(n)).collect() } else { (0..n).collect() };
        tree_imp.iter_mut().for_each(|v| *v = 0.0);
        trees.push(grow(data, &sample, params, &mut rng, &mut tree_imp));
        let total: f64 = tree_imp.iter().sum();
        if total > 0.0 {
            for (acc, v) in importance.iter_mut().zip(&tree_imp) {
                *acc += v / total;
            }
        }
    }
    if n_trees > 0 {
        importance.iter_mut().for_each(|v| *v /= n_trees as f64);
    }
    ForestFit { trees, importance }
}

/// Vote counts per class.
pub fn votes(trees: &[Tree], row: &[f64], n_classes: usize) -> Vec<u32> {
    let mut v = alloc::vec![0u32; n_classes];
    for t in trees {
        v[t.predict_class(row)] += 1;
    }
    v
}
