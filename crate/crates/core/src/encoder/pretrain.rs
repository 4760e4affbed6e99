//! Supervised pretraining for the discriminative encoder family.

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CheckpointManifest, Encoder, EncoderFamily, EncoderSpec, WeightsKind};
use crate::data::{augment, AugmentSpec, LabeledDataset};
use crate::nn::{softmax_cross_entropy, Adam, ClassifierNet, MicroResNet};
use crate::util;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn defaults(input_hw: usize, seed: u64) -> Self {
        PretrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 1e-3,
            augment: AugmentSpec {
                crop_scale_range: (0.6, 1.0),
                output_size: (input_hw, input_hw),
                jitter: crate::data::JitterStrengths {
                    brightness: 0.3,
                    contrast: 0.3,
                    saturation: 0.3,
                    hue: 0.08,
                },
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Encoder("pretraining batch size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Encoder("pretraining learning rate must be > 0".into()));
        }
        self.augment.validate()
    }
}

/// Train the backbone with a supervised classification objective on a
/// labeled corpus, then strip the classifier. Returns the frozen encoder.
pub fn pretrain_supervised(
    spec: &EncoderSpec,
    corpus: &LabeledDataset,
    cfg: &PretrainConfig,
) -> Result<Encoder> {
    if spec.family != EncoderFamily::Discriminative {
        return Err(Error::Encoder(
            "supervised pretraining applies to the discriminative family".into(),
        ));
    }
    spec.validate()?;
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Encoder("pretraining corpus is empty".into()));
    }

    let mut rng = util::rng_for(cfg.seed, &[0x9e7a]);
    let backbone = MicroResNet::new(spec.widths, spec.input_hw, &mut rng);
    let mut net = ClassifierNet::new(backbone, corpus.class_names().len(), &mut rng);
    let mut opt = Adam::new(cfg.learning_rate as f32);

    let labels = corpus.labels();
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let hw = spec.input_hw;

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = util::rng_for(cfg.seed, &[0x9e7b, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Array4::<f32>::zeros((chunk.len(), hw, hw, 3));
            for (row, &i) in chunk.iter().enumerate() {
                let view = augment(
                    &corpus.samples()[i].pixels,
                    &cfg.augment,
                    util::derive_seed(cfg.seed, &[0xa06, epoch as u64, i as u64]),
                )?;
                xb.index_axis_mut(Axis(0), row)
                    .assign(&super::input_from_raster(&view, hw));
            }
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            net.zero_grad();
            let (logits, ctx) = net.forward_train(&xb);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &yb);
            if !loss.is_finite() {
                return Err(Error::Encoder(format!(
                    "non-finite pretraining loss at epoch {epoch}"
                )));
            }
            net.backward(&dlogits, &ctx);
            opt.step(net.params_mut());
            epoch_loss += loss as f64;
            batches += 1;
        }
        log::info!(
            "pretrain epoch {epoch}: loss {:.5}",
            epoch_loss / batches.max(1) as f64
        );
    }

    let mut spec = spec.clone();
    spec.weights = WeightsKind::PretrainedSupervised;
    Ok(Encoder::from_parts(
        spec.clone(),
        net.backbone,
        CheckpointManifest {
            spec,
            tau: None,
            seed: cfg.seed,
            data_fingerprint: Some(corpus.fingerprint()),
        },
    ))
}
