//! K-nearest-neighbour classifier with fully deterministic tie handling.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::scaler::StandardScaler;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    x: Array2<f32>,
    y: Vec<usize>,
    scaler: StandardScaler,
}

impl KnnModel {
    pub fn fit(k: usize, x: ArrayView2<'_, f32>, y: &[usize]) -> Result<Self> {
        if k == 0 {
            return Err(Error::Head("knn k must be >= 1".into()));
        }
        if k > x.nrows() {
            return Err(Error::Head(format!(
                "knn k = {k} exceeds the {} training points",
                x.nrows()
            )));
        }
        let scaler = StandardScaler::fit(x);
        Ok(KnnModel {
            k,
            x: scaler.transform(x),
            y: y.to_vec(),
            scaler,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        if x.nrows() == 0 {
            return Ok(Vec::new());
        }
        if x.ncols() != self.x.ncols() {
            return Err(Error::Head(format!(
                "query dimension {} does not match fit dimension {}",
                x.ncols(),
                self.x.ncols()
            )));
        }
        let z = self.scaler.transform(x);
        Ok(z.rows().into_iter().map(|q| self.predict_one(q.as_slice().unwrap())).collect())
    }

    fn predict_one(&self, q: &[f32]) -> usize {
        // (squared distance, training index); index breaks distance ties.
        let mut dists: Vec<(f64, usize)> = self
            .x
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let d: f64 = row
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| {
                        let dv = (a - b) as f64;
                        dv * dv
                    })
                    .sum();
                (d, i)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        majority_vote(dists[..self.k].iter().map(|&(_, i)| self.y[i]))
    }
}

/// Majority vote; ties resolve to the lowest class index.
pub(crate) fn majority_vote(labels: impl Iterator<Item = usize>) -> usize {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for label in labels {
        match counts.iter_mut().find(|(l, _)| *l == label) {
            Some((_, c)) => *c += 1,
            None => counts.push((label, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("at least one label")
        .0
}
