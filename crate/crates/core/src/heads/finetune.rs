//! End-to-end fine-tuning heads: a full backbone over raw images, or a small
//! residual head over frozen local feature grids.

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;

use super::FineTuneSpec;
use crate::nn::{
    argmax_rows, softmax_cross_entropy, Adam, ClassifierNet, LocalHeadNet, MicroResNet, Param,
};
use crate::util;
use crate::{Error, Result};

/// Loss improvement below this counts as a plateau for early stopping.
const PLATEAU_MIN_DELTA: f32 = 1e-4;

/// Evaluation happens in chunks of this many samples.
const EVAL_BATCH: usize = 64;

pub(super) trait TrainableClassifier {
    type Ctx;
    fn forward_train(&mut self, x: &Array4<f32>) -> (Array2<f32>, Self::Ctx);
    fn forward_eval(&self, x: &Array4<f32>) -> Array2<f32>;
    fn backward(&mut self, dlogits: &Array2<f32>, ctx: &Self::Ctx);
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn zero_grad(&mut self);
}

impl TrainableClassifier for ClassifierNet {
    type Ctx = crate::nn::ClassifierOutCtx;
    fn forward_train(&mut self, x: &Array4<f32>) -> (Array2<f32>, Self::Ctx) {
        ClassifierNet::forward_train(self, x)
    }
    fn forward_eval(&self, x: &Array4<f32>) -> Array2<f32> {
        ClassifierNet::forward_eval(self, x)
    }
    fn backward(&mut self, dlogits: &Array2<f32>, ctx: &Self::Ctx) {
        ClassifierNet::backward(self, dlogits, ctx)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        ClassifierNet::params_mut(self)
    }
    fn zero_grad(&mut self) {
        ClassifierNet::zero_grad(self)
    }
}

impl TrainableClassifier for LocalHeadNet {
    type Ctx = crate::nn::LocalHeadNetCtx;
    fn forward_train(&mut self, x: &Array4<f32>) -> (Array2<f32>, Self::Ctx) {
        LocalHeadNet::forward_train(self, x)
    }
    fn forward_eval(&self, x: &Array4<f32>) -> Array2<f32> {
        LocalHeadNet::forward_eval(self, x)
    }
    fn backward(&mut self, dlogits: &Array2<f32>, ctx: &Self::Ctx) {
        LocalHeadNet::backward(self, dlogits, ctx)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        LocalHeadNet::params_mut(self)
    }
    fn zero_grad(&mut self) {
        LocalHeadNet::zero_grad(self)
    }
}

/// Copy the selected samples into a fresh batch tensor.
pub fn gather4(x: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, h, w, c) = x.dim();
    let mut out = Array4::<f32>::zeros((idx.len(), h, w, c));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&x.index_axis(Axis(0), i));
    }
    out
}

/// Seeded mini-batch training with plateau early stopping.
///
/// Returns the per-epoch mean losses. Aborts with a diagnostic if the loss
/// ever goes non-finite.
pub(super) fn train_loop<N: TrainableClassifier>(
    net: &mut N,
    x: &Array4<f32>,
    y: &[usize],
    spec: &FineTuneSpec,
    seed: u64,
) -> Result<Vec<f32>> {
    let n = y.len();
    let mut opt = Adam::new(spec.learning_rate as f32);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    let mut best = f32::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..spec.epochs {
        let mut rng = util::rng_for(seed, &[0xf17e, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(spec.batch_size.max(1)) {
            let xb = gather4(x, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            net.zero_grad();
            let (logits, ctx) = net.forward_train(&xb);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &yb);
            if !loss.is_finite() {
                return Err(Error::Head(format!(
                    "non-finite training loss at epoch {epoch}; aborting fine-tune"
                )));
            }
            net.backward(&dlogits, &ctx);
            opt.step(net.params_mut());
            epoch_loss += loss as f64;
            batches += 1;
        }
        let mean = (epoch_loss / batches.max(1) as f64) as f32;
        log::debug!("fine-tune epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);

        if mean < best - PLATEAU_MIN_DELTA {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= spec.plateau_patience {
                log::debug!("fine-tune early stop at epoch {epoch} (plateau)");
                break;
            }
        }
    }
    Ok(epoch_losses)
}

/// Predict labels, restricted to the classes seen during fit.
pub(super) fn predict_masked<N: TrainableClassifier>(
    net: &N,
    x: &Array4<f32>,
    seen: &[usize],
) -> Vec<usize> {
    let n = x.dim().0;
    let mut preds = Vec::with_capacity(n);
    let mut at = 0;
    while at < n {
        let hi = (at + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let xb = gather4(x, &idx);
        let mut logits = net.forward_eval(&xb);
        for mut row in logits.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                if !seen.contains(&j) {
                    *v = f32::NEG_INFINITY;
                }
            }
        }
        preds.extend(argmax_rows(&logits));
        at = hi;
    }
    preds
}

/// Fine-tune a full backbone (starting from `init`) on raw image batches.
pub fn train_image_classifier(
    spec: &FineTuneSpec,
    init: &MicroResNet,
    x: &Array4<f32>,
    y: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<(ClassifierNet, Vec<f32>)> {
    let mut rng = util::rng_for(seed, &[0xf1a7]);
    let mut net = ClassifierNet::new(init.clone(), n_classes, &mut rng);
    let losses = train_loop(&mut net, x, y, spec, seed)?;
    Ok((net, losses))
}

/// Train a residual head on frozen local feature grids.
pub fn train_local_classifier(
    spec: &FineTuneSpec,
    x: &Array4<f32>,
    y: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<(LocalHeadNet, Vec<f32>)> {
    let d = x.dim().3;
    let mut rng = util::rng_for(seed, &[0xf1a8]);
    let mut net = LocalHeadNet::new(d, n_classes, &mut rng);
    let losses = train_loop(&mut net, x, y, spec, seed)?;
    Ok((net, losses))
}
