//! Minimal CPU neural-network toolkit.
//!
//! Tensors are channels-last: batches are (N, H, W, C) and feature matrices
//! are (N, D). Layers expose explicit `forward`/`backward` pairs with
//! per-call context structs, so the same network can run several forward
//! passes (e.g. two augmented views) before backpropagating. All math is
//! plain ndarray on one thread, which keeps runs bit-reproducible.

mod conv;
mod linear;
mod norm;
mod resnet;
mod store;

pub use conv::{Conv2d, ConvCtx};
pub use linear::{Linear, LinearCtx};
pub use norm::{BatchNorm, BatchNormCtx};
pub use resnet::{
    ClassifierNet, ClassifierOutCtx, LocalHeadNet, LocalHeadNetCtx, MicroResNet, MicroResNetCtx,
    ResBlock, ResBlockCtx,
};
pub use store::TensorStore;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A learnable tensor with its gradient accumulator and Adam state.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let z = ArrayD::zeros(IxDyn(shape));
        Param {
            value: z.clone(),
            grad: z.clone(),
            m: z.clone(),
            v: z,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut p = Param::zeros(shape);
        p.value.fill(1.0);
        p
    }

    /// He-normal initialisation for ReLU stacks.
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut p = Param::zeros(shape);
        for v in p.value.iter_mut() {
            *v = dist.sample(rng) as f32;
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Adam optimizer over a flat list of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for p in params {
            azip_step(p, self.lr, self.beta1, self.beta2, self.eps, bc1, bc2);
        }
    }
}

fn azip_step(p: &mut Param, lr: f32, b1: f32, b2: f32, eps: f32, bc1: f32, bc2: f32) {
    let value = p.value.as_slice_mut().expect("contiguous param");
    let grad = p.grad.as_slice().expect("contiguous grad");
    let m = p.m.as_slice_mut().expect("contiguous m");
    let v = p.v.as_slice_mut().expect("contiguous v");
    for i in 0..value.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        value[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Elementwise ReLU; the output doubles as the backward mask.
pub fn relu4(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

/// dx = dy where the forward output was positive.
pub fn relu4_backward(dy: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Spatial mean pool: (N, H, W, C) -> (N, C).
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, h, w, c) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut y = Array2::<f32>::zeros((n, c));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    y[[b, k]] += x[[b, i, j, k]] * scale;
                }
            }
        }
    }
    y
}

/// Backward of [`global_avg_pool`].
pub fn global_avg_pool_backward(dy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    Array4::from_shape_fn((n, h, w, c), |(b, _, _, k)| dy[[b, k]] * scale)
}

/// Mean softmax cross-entropy; returns the loss and dL/dlogits.
pub fn softmax_cross_entropy(logits: &Array2<f32>, targets: &[usize]) -> (f32, Array2<f32>) {
    let (n, k) = logits.dim();
    assert_eq!(n, targets.len());
    let mut dlogits = Array2::<f32>::zeros((n, k));
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..k {
            let p = exps[j] / sum;
            dlogits[[i, j]] = (p as f32 - if j == targets[i] { 1.0 } else { 0.0 }) / n as f32;
        }
        loss -= (exps[targets[i]] / sum).ln();
    }
    ((loss / n as f64) as f32, dlogits)
}

/// Argmax per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (f32::NEG_INFINITY, 0usize);
            for (j, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, j);
                }
            }
            best.1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_ce_matches_hand_value() {
        // Two classes with equal logits: loss = ln 2, grad = (p - onehot)/n.
        let logits = array![[0.0f32, 0.0]];
        let (loss, d) = softmax_cross_entropy(&logits, &[0]);
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((d[[0, 0]] + 0.5).abs() < 1e-6);
        assert!((d[[0, 1]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_gradient_finite_difference() {
        let mut logits = array![[0.3f32, -0.2, 0.9], [1.0, 0.0, -1.0]];
        let targets = [2usize, 0];
        let (_, analytic) = softmax_cross_entropy(&logits, &targets);
        let h = 1e-3f32;
        for i in 0..2 {
            for j in 0..3 {
                let orig = logits[[i, j]];
                logits[[i, j]] = orig + h;
                let (lp, _) = softmax_cross_entropy(&logits, &targets);
                logits[[i, j]] = orig - h;
                let (lm, _) = softmax_cross_entropy(&logits, &targets);
                logits[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic[[i, j]]).abs() < 2e-3,
                    "fd {fd} vs analytic {}",
                    analytic[[i, j]]
                );
            }
        }
    }

    #[test]
    fn gap_means_each_channel() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, i, j, k)| {
            ((i * 2 + j) * 2 + k) as f32
        });
        let y = global_avg_pool(&x);
        // Channel 0 entries: 0, 2, 4, 6 -> 3; channel 1: 1, 3, 5, 7 -> 4.
        assert_eq!(y[[0, 0]], 3.0);
        assert_eq!(y[[0, 1]], 4.0);
        let dx = global_avg_pool_backward(&y, 2, 2);
        assert_eq!(dx[[0, 1, 1, 0]], 0.75);
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut p = Param::zeros(&[2]);
        p.value[[0]] = 3.0;
        p.value[[1]] = -2.0;
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            // grad of 0.5 x^2 is x.
            p.grad.assign(&p.value);
            opt.step(vec![&mut p]);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2));
    }
}
