//! Random forest over embeddings.
//!
//! Trees are grown on the full fit set (no bootstrap); diversity comes from
//! per-node random feature subsets, so a single tree with unlimited depth
//! reaches 100% training accuracy on any consistent training set.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::knn::majority_vote;
use crate::util;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Leaf {
        label: usize,
    },
    Split {
        feature: usize,
        threshold: f32,
        /// Index of the left child; right child is `left + 1 + left_subtree`.
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f32]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { label } => return label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    trees: Vec<Tree>,
    n_features: usize,
    n_classes: usize,
}

impl ForestModel {
    pub fn fit<'a>(
        n_trees: usize,
        max_depth: Option<usize>,
        x: ArrayView2<'a, f32>,
        y: &'a [usize],
        seed: u64,
    ) -> Result<Self> {
        if n_trees == 0 {
            return Err(Error::Head("random forest needs n_trees >= 1".into()));
        }
        if x.nrows() == 0 {
            return Err(Error::Head("random forest needs at least one sample".into()));
        }
        let n_classes = y.iter().copied().max().unwrap_or(0) + 1;
        let all: Vec<usize> = (0..x.nrows()).collect();
        let trees = (0..n_trees)
            .map(|t| {
                let mut builder = TreeBuilder {
                    x,
                    y,
                    n_classes,
                    max_depth,
                    rng: util::rng_for(seed, &[0x7265e5, t as u64]),
                    nodes: Vec::new(),
                };
                builder.grow(all.clone(), 0);
                Tree {
                    nodes: builder.nodes,
                }
            })
            .collect();
        Ok(ForestModel {
            trees,
            n_features: x.ncols(),
            n_classes,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        if x.ncols() != self.n_features {
            return Err(Error::Head(format!(
                "query dimension {} does not match fit dimension {}",
                x.ncols(),
                self.n_features
            )));
        }
        Ok(x.rows()
            .into_iter()
            .map(|row| {
                let row = row.as_slice().expect("contiguous row");
                majority_vote(self.trees.iter().map(|t| t.predict(row)))
            })
            .collect())
    }
}

struct TreeBuilder<'a> {
    x: ArrayView2<'a, f32>,
    y: &'a [usize],
    n_classes: usize,
    max_depth: Option<usize>,
    rng: rand_chacha::ChaCha8Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    /// Grow the subtree for `idxs`, returning its root node index.
    fn grow(&mut self, idxs: Vec<usize>, depth: usize) -> usize {
        let counts = self.class_counts(&idxs);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.max_depth.is_some_and(|d| depth >= d);

        if !pure && !depth_capped {
            if let Some((feature, threshold)) = self.best_split(&idxs, &counts) {
                let (li, ri): (Vec<usize>, Vec<usize>) = idxs
                    .iter()
                    .partition(|&&i| self.x[[i, feature]] <= threshold);
                let at = self.nodes.len();
                self.nodes.push(Node::Leaf { label: 0 }); // placeholder
                let left = self.grow(li, depth + 1);
                let right = self.grow(ri, depth + 1);
                self.nodes[at] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
                return at;
            }
        }
        let label = majority_label(&counts);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { label });
        at
    }

    fn class_counts(&self, idxs: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &i in idxs {
            counts[self.y[i]] += 1;
        }
        counts
    }

    /// Best Gini split among a random feature permutation. The first
    /// sqrt(D) features are always examined; further features are only
    /// tried while no valid split has been found, which keeps consistent
    /// nodes splittable. Impure nodes accept the best valid split even at
    /// zero gain (the gain may only show up a level deeper).
    fn best_split(&mut self, idxs: &[usize], counts: &[usize]) -> Option<(usize, f32)> {
        let d = self.x.ncols();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(&mut self.rng);
        let m = (d as f64).sqrt().ceil() as usize;

        let parent_gini = gini(counts, idxs.len());
        let mut best: Option<(f64, usize, f32)> = None;
        for (fi, &feature) in features.iter().enumerate() {
            if fi >= m && best.is_some() {
                break;
            }
            if let Some((gain, threshold)) = self.best_threshold(idxs, feature, parent_gini) {
                if best.as_ref().is_none_or(|(g, _, _)| gain > *g) {
                    best = Some((gain, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn best_threshold(&self, idxs: &[usize], feature: usize, parent_gini: f64) -> Option<(f64, f32)> {
        let mut vals: Vec<(f32, usize)> = idxs.iter().map(|&i| (self.x[[i, feature]], self.y[i])).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
        let n = vals.len();
        let total = {
            let mut c = vec![0usize; self.n_classes];
            for &(_, label) in &vals {
                c[label] += 1;
            }
            c
        };
        let mut left = vec![0usize; self.n_classes];
        let mut best: Option<(f64, f32)> = None;
        for i in 0..n - 1 {
            left[vals[i].1] += 1;
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let n_left = i + 1;
            let n_right = n - n_left;
            let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let w_gini = (n_left as f64 * gini(&left, n_left)
                + n_right as f64 * gini(&right, n_right))
                / n as f64;
            let gain = parent_gini - w_gini;
            if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                // Midpoint threshold between the adjacent distinct values.
                best = Some((gain, 0.5 * (vals[i].0 + vals[i + 1].0)));
            }
        }
        best
    }
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut g = 1.0;
    for &c in counts {
        let p = c as f64 / n as f64;
        g -= p * p;
    }
    g
}

fn majority_label(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(label, _)| label)
        .unwrap_or(0)
}
