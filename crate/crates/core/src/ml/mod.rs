//! Fault classifiers: CART decision tree, random forest and linear SVM,
//! plus stratified cross-validation and impurity-based feature ranking.
//!
//! Class labels are kept sorted, so "lowest class index" and "lexicographic
//! label order" are the same tie rule everywhere.

pub mod cv;
pub mod forest;
pub mod select;
pub mod svm;
pub mod tree;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;
use forest::{default_features_per_split, fit_forest, votes};
use svm::{fit_svm, LinearSvm, SvmFitParams};
use tree::{grow, GrowParams, TrainingData, Tree};

pub const LABELS: [&str; 3] = ["bearing_fault", "heating_fault", "normal"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MlError {
    #[error("training set is empty")]
    Empty,
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("row {0} has the wrong number of features")]
    Ragged(usize),
    #[error("row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("feature names do not match the model")]
    FeatureNames,
    #[error("need at least two classes")]
    SingleClass,
    #[error("invalid parameter: {0}")]
    Params(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dt,
    Rf,
    Svm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dt => "dt",
            ModelKind::Rf => "rf",
            ModelKind::Svm => "svm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: None, min_samples_leaf: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub bootstrap: bool,
    /// `None` means floor(sqrt(feature count)).
    pub features_per_split: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 100, bootstrap: true, features_per_split: None, max_depth: None, min_samples_leaf: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self { epochs: 100, learning_rate: 0.01, regularization: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "lowercase")]
pub enum ModelParams {
    Dt(TreeParams),
    Rf(ForestParams),
    Svm(SvmParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Dt(_) => ModelKind::Dt,
            ModelParams::Rf(_) => ModelKind::Rf,
            ModelParams::Svm(_) => ModelKind::Svm,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelParams::Dt(p) => p.seed,
            ModelParams::Rf(p) => p.seed,
            ModelParams::Svm(p) => p.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            ModelParams::Dt(p) => p.seed = seed,
            ModelParams::Rf(p) => p.seed = seed,
            ModelParams::Svm(p) => p.seed = seed,
        }
        self
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Dt => ModelParams::Dt(TreeParams::default()),
            ModelKind::Rf => ModelParams::Rf(ForestParams::default()),
            ModelKind::Svm => ModelParams::Svm(SvmParams::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Structure {
    Tree { tree: Tree },
    Forest { trees: Vec<Tree> },
    Svm { svm: LinearSvm },
    /// Training data had a single class.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model_kind: ModelKind,
    pub params: ModelParams,
    pub structure: Structure,
    /// Sorted, unique.
    pub classes: Vec<String>,
    pub feature_names: Vec<String>,
    pub seed: u64,
    /// Mean impurity decrease per feature, forests and trees only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub cycle_id: String,
    pub label: String,
    pub scores: BTreeMap<String, f64>,
    pub model_kind: ModelKind,
}

fn check_training(x: &[Vec<f64>], y: &[String]) -> Result<usize, MlError> {
    if x.is_empty() {
        return Err(MlError::Empty);
    }
    if x.len() != y.len() {
        return Err(MlError::LengthMismatch { rows: x.len(), labels: y.len() });
    }
    let d = x[0].len();
    for (i, r) in x.iter().enumerate() {
        if r.len() != d {
            return Err(MlError::Ragged(i));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(MlError::NonFinite(i));
        }
    }
    Ok(d)
}

/// Sorted distinct labels and each row's class index.
pub fn encode_labels(y: &[String]) -> (Vec<String>, Vec<usize>) {
    let classes: Vec<String> = y.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let idx = y.iter().map(|l| classes.binary_search(l).expect("label is present")).collect();
    (classes, idx)
}

pub fn train(params: &ModelParams, x: &[Vec<f64>], y: &[String], feature_names: &[String]) -> Result<TrainedModel, MlError> {
    let d = check_training(x, y)?;
    if feature_names.len() != d {
        return Err(MlError::FeatureNames);
    }
    let (classes, yi) = encode_labels(y);
    let k = classes.len();
    let data = TrainingData { x, y: &yi, n_classes: k };
    let mut importance = Vec::new();
    let structure = if k == 1 {
        Structure::Constant
    } else {
        match params {
            ModelParams::Dt(p) => {
                let gp = GrowParams { max_depth: p.max_depth, min_samples_leaf: p.min_samples_leaf, features_per_split: d };
                let sample: Vec<usize> = (0..x.len()).collect();
                let mut rng = crate::rng::XorShift64Star::new(p.seed);
                importance = alloc::vec![0.0; d];
                let tree = grow(&data, &sample, gp, &mut rng, &mut importance);
                Structure::Tree { tree }
            }
            ModelParams::Rf(p) => {
                if p.n_trees == 0 {
                    return Err(MlError::Params("n_trees must be at least 1"));
                }
                let m = p.features_per_split.unwrap_or_else(|| default_features_per_split(d));
                if m == 0 {
                    return Err(MlError::Params("features_per_split must be at least 1"));
                }
                let gp = GrowParams { max_depth: p.max_depth, min_samples_leaf: p.min_samples_leaf, features_per_split: m };
                let fit = fit_forest(&data, p.n_trees, p.bootstrap, gp, p.seed);
                importance = fit.importance;
                Structure::Forest { trees: fit.trees }
            }
            ModelParams::Svm(p) => {
                if !(p.learning_rate > 0.0 && p.regularization >= 0.0 && p.learning_rate * p.regularization < 1.0) {
                    return Err(MlError::Params("need learning_rate > 0, regularization >= 0, and their product < 1"));
                }
                let fp = SvmFitParams { epochs: p.epochs, learning_rate: p.learning_rate, regularization: p.regularization, seed: p.seed };
                Structure::Svm { svm: fit_svm(x, &yi, k, &fp) }
            }
        }
    };
    Ok(TrainedModel {
        model_kind: params.kind(),
        params: params.clone(),
        structure,
        classes,
        feature_names: feature_names.to_vec(),
        seed: params.seed(),
        importance,
    })
}

fn argmax_scores(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl TrainedModel {
    /// Per-class scores in `classes` order: leaf class fractions for a tree,
    /// vote fractions for a forest, decision values for the SVM.
    pub fn scores(&self, row: &[f64]) -> Vec<f64> {
        let k = self.classes.len();
        match &self.structure {
            Structure::Constant => alloc::vec![1.0],
            Structure::Tree { tree } => {
                let c = tree.leaf_counts(row);
                let n: u32 = c.iter().sum();
                c.iter().map(|&v| v as f64 / n as f64).collect()
            }
            Structure::Forest { trees } => {
                votes(trees, row, k).iter().map(|&v| v as f64 / trees.len() as f64).collect()
            }
            Structure::Svm { svm } => svm.decision_values(row),
        }
    }

    pub fn predict_index(&self, row: &[f64]) -> usize {
        match &self.structure {
            // Integer vote/leaf counts decide exactly, with no rounding.
            Structure::Tree { tree } => tree.predict_class(row),
            Structure::Forest { trees } => tree::argmax_first(&votes(trees, row, self.classes.len())),
            _ => argmax_scores(&self.scores(row)),
        }
    }

    pub fn predict_label(&self, row: &[f64]) -> &str {
        &self.classes[self.predict_index(row)]
    }

    pub fn predict(&self, features: &FeatureVector) -> Result<Prediction, MlError> {
        if features.names != self.feature_names {
            return Err(MlError::FeatureNames);
        }
        let scores = self.scores(&features.values);
        Ok(Prediction {
            cycle_id: features.cycle_id.clone(),
            label: self.predict_label(&features.values).into(),
            scores: self.classes.iter().cloned().zip(scores).collect(),
            model_kind: self.model_kind,
        })
    }
}

pub fn accuracy(model: &TrainedModel, x: &[Vec<f64>], y: &[String]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let hits = x.iter().zip(y).filter(|(r, l)| model.predict_label(r) == l.as_str()).count();
    hits as f64 / x.len() as f64
}

/// `f00`, `f01`, ... for callers without real feature names.
pub fn generic_names(d: usize) -> Vec<String> {
    (0..d).map(|i| alloc::format!("f{i:02}")).collect()
}
