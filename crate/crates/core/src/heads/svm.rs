//! RBF-kernel support vector machine trained with sequential minimal
//! optimization. All pivot choices are deterministic (ties resolve to the
//! lowest index), so refitting the same data yields the same model.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::scaler::StandardScaler;
use crate::{Error, Result};

/// How the RBF bandwidth is chosen at fit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    /// 1 / (n_features * variance of the fit matrix entries).
    Scale,
    /// 1 / (2 * median^2) of pairwise training distances.
    Median,
    /// Fixed value.
    Fixed(f64),
}

/// exp(-gamma * ||x - y||^2); in (0, 1], equal to 1 at zero distance.
pub fn rbf_kernel(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Head(format!(
            "rbf_kernel dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if gamma < 0.0 {
        return Err(Error::Head(format!("rbf_kernel gamma must be >= 0, got {gamma}")));
    }
    let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-gamma * sq).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BinarySvm {
    sv_x: Array2<f64>,
    /// alpha_i * y_i per support vector.
    sv_coef: Vec<f64>,
    bias: f64,
}

impl BinarySvm {
    fn decision(&self, x: ArrayView1<'_, f64>, gamma: f64) -> f64 {
        let mut sum = 0.0;
        for (row, coef) in self.sv_x.rows().into_iter().zip(&self.sv_coef) {
            sum += coef * rbf_kernel(row, x, gamma).expect("dims fixed at fit");
        }
        sum - self.bias
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmModel {
    /// One machine per class (one-vs-rest); a single machine for binary fits.
    machines: Vec<BinarySvm>,
    classes: Vec<usize>,
    scaler: StandardScaler,
    gamma: f64,
    c: f64,
}

impl SvmModel {
    pub fn fit(c: f64, gamma_rule: GammaRule, x: ArrayView2<'_, f32>, y: &[usize]) -> Result<Self> {
        if c <= 0.0 {
            return Err(Error::Head(format!("svm C must be > 0, got {c}")));
        }
        let mut classes: Vec<usize> = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Head(
                "svm needs at least two classes in the training labels".into(),
            ));
        }
        let scaler = StandardScaler::fit(x);
        let z32 = scaler.transform(x);
        let z = z32.mapv(|v| v as f64);
        let gamma = resolve_gamma(gamma_rule, z.view())?;

        let kernel = precompute_kernel(z.view(), gamma);
        let machines = if classes.len() == 2 {
            let targets: Vec<f64> = y.iter().map(|&l| if l == classes[1] { 1.0 } else { -1.0 }).collect();
            vec![train_binary(z.view(), &targets, c, &kernel)]
        } else {
            classes
                .iter()
                .map(|&cls| {
                    let targets: Vec<f64> =
                        y.iter().map(|&l| if l == cls { 1.0 } else { -1.0 }).collect();
                    train_binary(z.view(), &targets, c, &kernel)
                })
                .collect()
        };

        Ok(SvmModel {
            machines,
            classes,
            scaler,
            gamma,
            c,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        if x.nrows() == 0 {
            return Ok(Vec::new());
        }
        if x.ncols() != self.scaler.dim() {
            return Err(Error::Head(format!(
                "query dimension {} does not match fit dimension {}",
                x.ncols(),
                self.scaler.dim()
            )));
        }
        let z = self.scaler.transform(x).mapv(|v| v as f64);
        let preds = z
            .rows()
            .into_iter()
            .map(|row| {
                if self.machines.len() == 1 {
                    let d = self.machines[0].decision(row, self.gamma);
                    if d > 0.0 {
                        self.classes[1]
                    } else {
                        self.classes[0]
                    }
                } else {
                    // One-vs-rest argmax; ties resolve to the lowest class.
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (m, &cls) in self.machines.iter().zip(&self.classes) {
                        let d = m.decision(row, self.gamma);
                        if d > best.0 {
                            best = (d, cls);
                        }
                    }
                    best.1
                }
            })
            .collect();
        Ok(preds)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

fn resolve_gamma(rule: GammaRule, z: ArrayView2<'_, f64>) -> Result<f64> {
    match rule {
        GammaRule::Fixed(g) => {
            if g <= 0.0 {
                Err(Error::Head(format!("fixed gamma must be > 0, got {g}")))
            } else {
                Ok(g)
            }
        }
        GammaRule::Scale => {
            let n = (z.nrows() * z.ncols()) as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var <= 1e-12 {
                Ok(1.0)
            } else {
                Ok(1.0 / (z.ncols() as f64 * var))
            }
        }
        GammaRule::Median => {
            let mut dists = Vec::new();
            for i in 0..z.nrows() {
                for j in i + 1..z.nrows() {
                    let d: f64 = z
                        .row(i)
                        .iter()
                        .zip(z.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    dists.push(d.sqrt());
                }
            }
            let med = crate::util::median(&mut dists)
                .ok_or_else(|| Error::Head("median gamma needs >= 2 training points".into()))?;
            if med <= 1e-12 {
                Ok(1.0)
            } else {
                Ok(1.0 / (2.0 * med * med))
            }
        }
    }
}

fn precompute_kernel(z: ArrayView2<'_, f64>, gamma: f64) -> Array2<f64> {
    let n = z.nrows();
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = rbf_kernel(z.row(i), z.row(j), gamma).expect("same dims");
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

const TOL: f64 = 1e-3;
const STEP_EPS: f64 = 1e-8;

struct Smo<'a> {
    y: &'a [f64],
    c: f64,
    kernel: &'a Array2<f64>,
    alpha: Vec<f64>,
    errors: Vec<f64>,
    bias: f64,
}

/// Platt's SMO over a precomputed kernel matrix.
fn train_binary(z: ArrayView2<'_, f64>, y: &[f64], c: f64, kernel: &Array2<f64>) -> BinarySvm {
    let n = y.len();
    let mut smo = Smo {
        y,
        c,
        kernel,
        alpha: vec![0.0; n],
        // u_i = 0 initially, so E_i = -y_i.
        errors: y.iter().map(|&t| -t).collect(),
        bias: 0.0,
    };

    let mut examine_all = true;
    let mut sweeps = 0usize;
    loop {
        sweeps += 1;
        let mut changed = 0usize;
        if examine_all {
            for i in 0..n {
                changed += smo.examine(i) as usize;
            }
        } else {
            for i in 0..n {
                if smo.alpha[i] > 0.0 && smo.alpha[i] < c {
                    changed += smo.examine(i) as usize;
                }
            }
        }
        if examine_all {
            if changed == 0 {
                // Full pass with no progress: KKT satisfied within tolerance.
                break;
            }
            examine_all = false;
        } else if changed == 0 {
            examine_all = true;
        }
        if sweeps > 500 {
            // Guard against pathological data; the solution is still usable.
            log::warn!("svm smo hit the sweep cap before reaching KKT tolerance");
            break;
        }
    }

    let sv: Vec<usize> = (0..n).filter(|&i| smo.alpha[i] > 0.0).collect();
    let sv_x = Array2::from_shape_fn((sv.len(), z.ncols()), |(r, c)| z[[sv[r], c]]);
    let sv_coef = sv.iter().map(|&i| smo.alpha[i] * y[i]).collect();
    BinarySvm {
        sv_x,
        sv_coef,
        bias: smo.bias,
    }
}

impl Smo<'_> {
    fn examine(&mut self, i2: usize) -> bool {
        let y2 = self.y[i2];
        let alph2 = self.alpha[i2];
        let e2 = self.errors[i2];
        let r2 = e2 * y2;
        let violates = (r2 < -TOL && alph2 < self.c) || (r2 > TOL && alph2 > 0.0);
        if !violates {
            return false;
        }

        // Heuristic 1: the non-bound point with the largest |E1 - E2|.
        let mut best: Option<(f64, usize)> = None;
        for i in 0..self.alpha.len() {
            if self.alpha[i] > 0.0 && self.alpha[i] < self.c {
                let gap = (self.errors[i] - e2).abs();
                if best.is_none_or(|(g, _)| gap > g) {
                    best = Some((gap, i));
                }
            }
        }
        if let Some((_, i1)) = best {
            if self.take_step(i1, i2) {
                return true;
            }
        }
        // Heuristic 2: every non-bound point, then everything.
        for i1 in 0..self.alpha.len() {
            if self.alpha[i1] > 0.0 && self.alpha[i1] < self.c && self.take_step(i1, i2) {
                return true;
            }
        }
        for i1 in 0..self.alpha.len() {
            if self.take_step(i1, i2) {
                return true;
            }
        }
        false
    }

    fn take_step(&mut self, i1: usize, i2: usize) -> bool {
        if i1 == i2 {
            return false;
        }
        let (y1, y2) = (self.y[i1], self.y[i2]);
        let (alph1, alph2) = (self.alpha[i1], self.alpha[i2]);
        let (e1, e2) = (self.errors[i1], self.errors[i2]);
        let s = y1 * y2;

        let (lo, hi) = if (y1 - y2).abs() > 0.5 {
            ((alph2 - alph1).max(0.0), (self.c + alph2 - alph1).min(self.c))
        } else {
            ((alph2 + alph1 - self.c).max(0.0), (alph2 + alph1).min(self.c))
        };
        if hi - lo < STEP_EPS {
            return false;
        }

        let k11 = self.kernel[[i1, i1]];
        let k12 = self.kernel[[i1, i2]];
        let k22 = self.kernel[[i2, i2]];
        let eta = k11 + k22 - 2.0 * k12;
        if eta <= 0.0 {
            // Degenerate direction (duplicate points); skip it.
            return false;
        }
        let mut a2 = alph2 + y2 * (e1 - e2) / eta;
        a2 = a2.clamp(lo, hi);
        if (a2 - alph2).abs() < STEP_EPS * (a2 + alph2 + STEP_EPS) {
            return false;
        }
        let a1 = alph1 + s * (alph2 - a2);

        let b1 = e1 + y1 * (a1 - alph1) * k11 + y2 * (a2 - alph2) * k12 + self.bias;
        let b2 = e2 + y1 * (a1 - alph1) * k12 + y2 * (a2 - alph2) * k22 + self.bias;
        let new_bias = if a1 > 0.0 && a1 < self.c {
            b1
        } else if a2 > 0.0 && a2 < self.c {
            b2
        } else {
            0.5 * (b1 + b2)
        };

        let d1 = y1 * (a1 - alph1);
        let d2 = y2 * (a2 - alph2);
        for i in 0..self.errors.len() {
            self.errors[i] +=
                d1 * self.kernel[[i1, i]] + d2 * self.kernel[[i2, i]] + self.bias - new_bias;
        }
        self.alpha[i1] = a1;
        self.alpha[i2] = a2;
        self.bias = new_bias;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kernel_identities() {
        let x = array![1.0f64, -2.0, 0.5];
        assert!((rbf_kernel(x.view(), x.view(), 3.0).unwrap() - 1.0).abs() < 1e-15);
        let y = array![0.0f64, 1.0, 2.0];
        assert!((rbf_kernel(x.view(), y.view(), 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kernel_hand_value() {
        let x = array![0.0f64, 0.0];
        let y = array![1.0f64, 1.0];
        let k = rbf_kernel(x.view(), y.view(), 0.5).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-12, "k = {k}");
    }

    #[test]
    fn kernel_dim_mismatch() {
        let x = array![0.0f64];
        let y = array![1.0f64, 1.0];
        assert!(rbf_kernel(x.view(), y.view(), 1.0).is_err());
    }

    #[test]
    fn separable_toy_problem() {
        let x = array![[-1.0f32, 0.0], [1.0, 0.0]];
        let y = vec![0, 1];
        let m = SvmModel::fit(1.0, GammaRule::Scale, x.view(), &y).unwrap();
        let q = array![[-5.0f32, 0.0], [5.0, 0.0]];
        assert_eq!(m.predict(q.view()).unwrap(), vec![0, 1]);
    }

    #[test]
    fn wider_margin_toy_problem() {
        let x = array![
            [-2.0f32, 0.3],
            [-1.5, -0.2],
            [-1.0, 0.1],
            [1.0, -0.3],
            [1.5, 0.2],
            [2.0, 0.0]
        ];
        let y = vec![0, 0, 0, 1, 1, 1];
        let m = SvmModel::fit(1.0, GammaRule::Scale, x.view(), &y).unwrap();
        assert_eq!(m.predict(x.view()).unwrap(), y);
        let q = array![[-0.8f32, 0.0], [0.8, 0.0]];
        assert_eq!(m.predict(q.view()).unwrap(), vec![0, 1]);
    }

    #[test]
    fn duplicate_training_point_does_not_change_predictions() {
        let base = array![
            [-1.2f32, 0.1],
            [-0.8, -0.1],
            [0.9, 0.2],
            [1.1, -0.2]
        ];
        let with_dup = array![
            [-1.2f32, 0.1],
            [-0.8, -0.1],
            [-0.8, -0.1],
            [0.9, 0.2],
            [1.1, -0.2]
        ];
        let ma = SvmModel::fit(1.0, GammaRule::Fixed(0.7), base.view(), &[0, 0, 1, 1]).unwrap();
        let mb =
            SvmModel::fit(1.0, GammaRule::Fixed(0.7), with_dup.view(), &[0, 0, 0, 1, 1]).unwrap();
        let grid = array![[-2.0f32, 0.0], [-0.5, 0.0], [0.5, 0.0], [2.0, 0.0]];
        assert_eq!(ma.predict(grid.view()).unwrap(), mb.predict(grid.view()).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let x = array![[0.0f32], [1.0]];
        assert!(SvmModel::fit(1.0, GammaRule::Scale, x.view(), &[0, 0]).is_err());
    }

    #[test]
    fn three_class_one_vs_rest() {
        let x = array![
            [0.0f32, 0.0],
            [0.1, 0.1],
            [5.0, 5.0],
            [5.1, 4.9],
            [-5.0, 5.0],
            [-5.1, 5.1]
        ];
        let y = vec![0, 0, 1, 1, 2, 2];
        let m = SvmModel::fit(10.0, GammaRule::Scale, x.view(), &y).unwrap();
        assert_eq!(m.predict(x.view()).unwrap(), y);
    }
}
