//! CART classification trees with Gini impurity.
//!
//! Every candidate split is scored exactly in integer arithmetic, so ties
//! really are ties: the lowest feature index wins, then the lowest threshold.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::XorShift64Star;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Leaf { counts: Vec<u32> },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
}

pub(crate) struct TrainingData<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [usize],
    pub n_classes: usize,
}

impl Tree {
    pub fn leaf_counts(&self, row: &[f64]) -> &[u32] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { counts } => return counts,
                Node::Split { feature, threshold, left, right } => {
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Majority class of the reached leaf, ties to the lowest class index.
    pub fn predict_class(&self, row: &[f64]) -> usize {
        argmax_first(self.leaf_counts(row))
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

pub(crate) fn argmax_first(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

struct Best {
    feature: usize,
    threshold: f64,
    /// Score numerator and denominator: sum_l^2 * n_r + sum_r^2 * n_l over n_l * n_r.
    num: u128,
    den: u128,
    n_left: usize,
}

struct Grower<'a, 'r> {
    data: &'a TrainingData<'a>,
    params: GrowParams,
    rng: &'r mut XorShift64Star,
    importance: &'r mut [f64],
    total: f64,
    nodes: Vec<Node>,
    scratch: Vec<usize>,
}

/// Grows a tree on `sample` (row indices, repeats allowed) and adds each
/// split's weighted impurity decrease to `importance`.
pub(crate) fn grow(
    data: &TrainingData<'_>,
    sample: &[usize],
    params: GrowParams,
    rng: &mut XorShift64Star,
    importance: &mut [f64],
) -> Tree {
    let mut g = Grower {
        data,
        params,
        rng,
        importance,
        total: sample.len() as f64,
        nodes: Vec::new(),
        scratch: Vec::new(),
    };
    let mut sample = sample.to_vec();
    g.build(&mut sample, 0);
    Tree { nodes: g.nodes }
}

impl Grower<'_, '_> {
    fn counts(&self, rows: &[usize]) -> Vec<u32> {
        let mut c = alloc::vec![0u32; self.data.n_classes];
        for &r in rows {
            c[self.data.y[r]] += 1;
        }
        c
    }

    fn build(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let counts = self.counts(rows);
        self.nodes.push(Node::Leaf { counts: counts.clone() });

        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if pure || !depth_ok || rows.len() < 2 * self.params.min_samples_leaf.max(1) {
            return id;
        }
        let Some(best) = self.best_split(rows) else { return id };

        let n = rows.len() as f64;
        let parent_sq: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>() / n;
        let decrease = (best.num as f64 / best.den as f64 - parent_sq) / self.total;
        self.importance[best.feature] += decrease.max(0.0);

        let (f, t) = (best.feature, best.threshold);
        let x = self.data.x;
        // Stable partition keeps sample order deterministic.
        let (mut l, mut r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][f] <= t);
        debug_assert_eq!(l.len(), best.n_left);
        let left = self.build(&mut l, depth + 1);
        let right = self.build(&mut r, depth + 1);
        self.nodes[id] = Node::Split { feature: f, threshold: t, left, right };
        id
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let d = self.data.x[0].len();
        let m = self.params.features_per_split.clamp(1, d);
        if m >= d {
            return (0..d).collect();
        }
        let mut all: Vec<usize> = (0..d).collect();
        for i in 0..m {
            let j = i + self.rng.below(d - i);
            all.swap(i, j);
        }
        all.truncate(m);
        all.sort_unstable();
        all
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<Best> {
        let x = self.data.x;
        let y = self.data.y;
        let k = self.data.n_classes;
        let msl = self.params.min_samples_leaf.max(1);
        let n = rows.len();
        let total = self.counts(rows);
        let mut best: Option<Best> = None;
        for f in self.candidate_features() {
            let order = &mut self.scratch;
            order.clear();
            order.extend_from_slice(rows);
            order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
            let mut left = alloc::vec![0u64; k];
            let mut sum_l: u64 = 0;
            let mut sum_r: u64 = total.iter().map(|&c| (c as u64).pow(2)).sum();
            for pos in 0..n - 1 {
                let c = y[order[pos]];
                // Moving one sample of class c from right to left.
                let rc = total[c] as u64 - left[c];
                sum_r = sum_r + 1 - 2 * rc;
                sum_l = sum_l + 2 * left[c] + 1;
                left[c] += 1;
                let (a, b) = (x[order[pos]][f], x[order[pos + 1]][f]);
                if a == b {
                    continue;
                }
                let nl = pos + 1;
                let nr = n - nl;
                if nl < msl || nr < msl {
                    continue;
                }
                let num = sum_l as u128 * nr as u128 + sum_r as u128 * nl as u128;
                let den = nl as u128 * nr as u128;
                let better = match &best {
                    None => true,
                    Some(b) => num * b.den > b.num * den,
                };
                if better {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(Best { feature: f, threshold, num, den, n_left: nl });
                }
            }
        }
        best
    }
}
