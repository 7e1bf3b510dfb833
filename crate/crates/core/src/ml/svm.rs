//! Linear one-vs-rest SVM trained by subgradient descent on the
//! L2-regularized hinge loss.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::XorShift64Star;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// One weight vector per class.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl LinearSvm {
    pub fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.means).zip(&self.scales).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn decision_values(&self, row: &[f64]) -> Vec<f64> {
        let z = self.standardize(row);
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }
}

pub(crate) struct SvmFitParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub seed: u64,
}

pub(crate) fn fit_svm(x: &[Vec<f64>], y: &[usize], n_classes: usize, p: &SvmFitParams) -> LinearSvm {
    let n = x.len();
    let d = x[0].len();
    let mut means = alloc::vec![0.0; d];
    let mut scales = alloc::vec![0.0; d];
    for j in 0..d {
        let m = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = x.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / n as f64;
        let s = libm::sqrt(var);
        means[j] = m;
        scales[j] = if s > 1e-12 { s } else { 1.0 };
    }
    let mut svm = LinearSvm { means, scales, weights: Vec::new(), biases: Vec::new() };
    let z: Vec<Vec<f64>> = x.iter().map(|r| svm.standardize(r)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = XorShift64Star::new(p.seed);
    let mut weights = alloc::vec![alloc::vec![0.0; d]; n_classes];
    let mut biases = alloc::vec![0.0; n_classes];
    let shrink = 1.0 - p.learning_rate * p.regularization;
    for _ in 0..p.epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            for c in 0..n_classes {
                let target = if y[i] == c { 1.0 } else { -1.0 };
                let w = &mut weights[c];
                let margin = target * (w.iter().zip(&z[i]).map(|(a, b)| a * b).sum::<f64>() + biases[c]);
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    for (v, zi) in w.iter_mut().zip(&z[i]) {
                        *v += p.learning_rate * target * zi;
                    }
                    biases[c] += p.learning_rate * target;
                }
            }
        }
    }
    svm.weights = weights;
    svm.biases = biases;
    svm
}
