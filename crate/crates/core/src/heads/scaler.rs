//! Per-dimension standardization with statistics taken from the fit set only.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Zero-mean unit-variance transform. Constant dimensions pass through
/// unscaled so they stay constant rather than exploding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl StandardScaler {
    pub fn fit(x: ArrayView2<'_, f32>) -> Self {
        let (n, d) = x.dim();
        let mut mean = vec![0.0f64; d];
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n.max(1) as f64;
        }
        let mut var = vec![0.0f64; d];
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                let dv = v as f64 - mean[j];
                var[j] += dv * dv;
            }
        }
        let inv_std = var
            .iter()
            .map(|&v| {
                let sd = (v / n.max(1) as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    (1.0 / sd) as f32
                }
            })
            .collect();
        StandardScaler {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            inv_std,
        }
    }

    pub fn transform(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) * self.inv_std[j];
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}
