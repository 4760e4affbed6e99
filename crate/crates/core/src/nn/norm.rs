//! Per-channel batch normalisation for channels-last batches.

use ndarray::{Array1, Array4, Axis};

use super::Param;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub struct BatchNormCtx {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::ones(&[channels]),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Training-mode forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BatchNormCtx) {
        let (n, h, w, c) = x.dim();
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0f64; c];
        for v in x.lanes(Axis(3)) {
            for (k, &xv) in v.iter().enumerate() {
                mean[k] += xv as f64;
            }
        }
        for mk in &mut mean {
            *mk /= m;
        }
        let mut var = vec![0.0f64; c];
        for v in x.lanes(Axis(3)) {
            for (k, &xv) in v.iter().enumerate() {
                let d = xv as f64 - mean[k];
                var[k] += d * d;
            }
        }
        for vk in &mut var {
            *vk /= m;
        }

        let inv_std =
            Array1::from_iter(var.iter().map(|&v| (1.0 / (v + self.eps as f64).sqrt()) as f32));
        let mean32 = Array1::from_iter(mean.iter().map(|&v| v as f32));

        for k in 0..c {
            self.running_mean[k] =
                (1.0 - self.momentum) * self.running_mean[k] + self.momentum * mean32[k];
            self.running_var[k] =
                (1.0 - self.momentum) * self.running_var[k] + self.momentum * var[k] as f32;
        }

        let mut xhat = x.clone();
        for mut row in xhat.lanes_mut(Axis(3)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean32[k]) * inv_std[k];
            }
        }
        let mut y = xhat.clone();
        let gamma = self.gamma.value.as_slice().expect("contiguous gamma");
        let beta = self.beta.value.as_slice().expect("contiguous beta");
        for mut row in y.lanes_mut(Axis(3)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * gamma[k] + beta[k];
            }
        }
        (y, BatchNormCtx { xhat, inv_std })
    }

    /// Inference-mode forward using running statistics; no context needed.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let gamma = self.gamma.value.as_slice().expect("contiguous gamma");
        let beta = self.beta.value.as_slice().expect("contiguous beta");
        let mut y = x.clone();
        let c = self.channels();
        let scale: Vec<f32> = (0..c)
            .map(|k| gamma[k] / (self.running_var[k] + self.eps).sqrt())
            .collect();
        for mut row in y.lanes_mut(Axis(3)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.running_mean[k]) * scale[k] + beta[k];
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>, ctx: &BatchNormCtx) -> Array4<f32> {
        let (n, h, w, c) = dy.dim();
        let m = (n * h * w) as f32;
        let gamma = self.gamma.value.as_slice().expect("contiguous gamma");

        // Per-channel reductions.
        let mut sum_dy = vec![0.0f32; c];
        let mut sum_dy_xhat = vec![0.0f32; c];
        for (drow, xrow) in dy.lanes(Axis(3)).into_iter().zip(ctx.xhat.lanes(Axis(3))) {
            for k in 0..c {
                sum_dy[k] += drow[k];
                sum_dy_xhat[k] += drow[k] * xrow[k];
            }
        }
        {
            let gg = self.gamma.grad.as_slice_mut().expect("contiguous grad");
            let gb = self.beta.grad.as_slice_mut().expect("contiguous grad");
            for k in 0..c {
                gg[k] += sum_dy_xhat[k];
                gb[k] += sum_dy[k];
            }
        }

        let mut dx = dy.clone();
        for (mut drow, xrow) in dx.lanes_mut(Axis(3)).into_iter().zip(ctx.xhat.lanes(Axis(3))) {
            for k in 0..c {
                let term = m * drow[k] - sum_dy[k] - xrow[k] * sum_dy_xhat[k];
                drow[k] = gamma[k] * ctx.inv_std[k] * term / m;
            }
        }
        dx
    }
}
