//! Self-supervised encoder training: maximise agreement between projected
//! global and local representations of two augmented views of the same
//! image, against locals from other images in the batch.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::infonce::{infonce_loss_grad, Pairing};
use super::{inputs_batch, CheckpointManifest, Encoder, EncoderFamily, EncoderSpec, LocalLayer, WeightsKind};
use crate::data::{augment, AugmentSpec, JitterStrengths, LabeledDataset, Raster};
use crate::nn::{global_avg_pool, global_avg_pool_backward, Adam, Linear, MicroResNet};
use crate::util;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Contrastive temperature tau.
    pub temperature: f64,
    pub projection_dim: usize,
    /// View fed to the global branch.
    pub augment_global: AugmentSpec,
    /// View fed to the local branch.
    pub augment_local: AugmentSpec,
    pub seed: u64,
}

impl DimTrainConfig {
    pub fn defaults(input_hw: usize, seed: u64) -> Self {
        let jitter = JitterStrengths {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        };
        DimTrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 1e-3,
            temperature: 0.1,
            projection_dim: 128,
            augment_global: AugmentSpec {
                crop_scale_range: (0.5, 1.0),
                output_size: (input_hw, input_hw),
                jitter,
            },
            augment_local: AugmentSpec {
                crop_scale_range: (0.5, 1.0),
                output_size: (input_hw, input_hw),
                jitter,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Encoder(
                "contrastive batch size must be >= 2 (a batch of 1 has no negatives)".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Encoder("temperature must be > 0".into()));
        }
        if self.projection_dim == 0 {
            return Err(Error::Encoder("projection_dim must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Encoder("learning rate must be > 0".into()));
        }
        self.augment_global.validate()?;
        self.augment_local.validate()
    }
}

/// Row-wise L2 normalisation; returns outputs and the norms for backward.
fn l2_normalize_rows(x: &Array2<f32>) -> (Array2<f32>, Array1<f32>) {
    let mut y = x.clone();
    let mut norms = Array1::<f32>::zeros(x.nrows());
    for (i, mut row) in y.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-8);
        norms[i] = n;
        row.mapv_inplace(|v| v / n);
    }
    (y, norms)
}

/// dx = (dy - y * <dy, y>) / norm, row-wise.
fn l2_normalize_backward(dy: &Array2<f32>, y: &Array2<f32>, norms: &Array1<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    for i in 0..dy.nrows() {
        let dot: f32 = dy.row(i).iter().zip(y.row(i).iter()).map(|(a, b)| a * b).sum();
        for (v, yv) in dx.row_mut(i).iter_mut().zip(y.row(i).iter()) {
            *v = (*v - yv * dot) / norms[i];
        }
    }
    dx
}

/// Train a self-supervised encoder on an unlabeled pool (labels ignored).
///
/// Per batch, every image contributes an augmented global view and an
/// augmented local view; the contrastive loss pulls each image's projected
/// global embedding toward its own projected local vectors and away from
/// other images' locals. Returns the trained encoder and per-epoch losses.
///
/// With `epochs = 0` the freshly initialised encoder is returned unchanged.
pub fn train_dim(
    unlabeled: &LabeledDataset,
    spec: &EncoderSpec,
    cfg: &DimTrainConfig,
) -> Result<(Encoder, Vec<f32>)> {
    if spec.family != EncoderFamily::SelfSupervised {
        return Err(Error::Encoder(
            "train_dim builds encoders of the self-supervised family".into(),
        ));
    }
    {
        // The spec arrives without trained weights; validate the rest.
        let mut probe = spec.clone();
        probe.weights = WeightsKind::RandomInit;
        probe.validate()?;
    }
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Encoder("self-supervision pool is empty".into()));
    }

    let mut rng = util::rng_for(cfg.seed, &[0xd1a0]);
    let mut net = MicroResNet::new(spec.widths, spec.input_hw, &mut rng);
    let d_global = spec.widths[2];
    let d_local = spec.embed_dim();
    let mut proj_g = Linear::new(d_global, cfg.projection_dim, &mut rng);
    let mut proj_l = Linear::new(d_local, cfg.projection_dim, &mut rng);
    let mut opt = Adam::new(cfg.learning_rate as f32);

    let imgs: Vec<&Raster> = unlabeled.samples().iter().map(|s| &s.pixels).collect();
    let n = imgs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let tau = cfg.temperature as f32;
    let hw = spec.input_hw;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = util::rng_for(cfg.seed, &[0xd1a1, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                // A trailing singleton has no negatives; skip it.
                continue;
            }
            let mut views_g: Vec<Raster> = Vec::with_capacity(chunk.len());
            let mut views_l: Vec<Raster> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                views_g.push(augment(
                    imgs[i],
                    &cfg.augment_global,
                    util::derive_seed(cfg.seed, &[0xa9, epoch as u64, i as u64, 0]),
                )?);
                views_l.push(augment(
                    imgs[i],
                    &cfg.augment_local,
                    util::derive_seed(cfg.seed, &[0xa9, epoch as u64, i as u64, 1]),
                )?);
            }
            let xg = inputs_batch(&views_g.iter().collect::<Vec<_>>(), hw);
            let xl = inputs_batch(&views_l.iter().collect::<Vec<_>>(), hw);

            net.zero_grad();
            proj_g.weight.zero_grad();
            proj_g.bias.zero_grad();
            proj_l.weight.zero_grad();
            proj_l.bias.zero_grad();

            // Global branch: view A -> final stage -> pooled -> projection.
            let (_, _, feat_g, ctx_g) = net.forward_train_stages(&xg);
            let (_, gh, gw, _) = feat_g.dim();
            let pooled = global_avg_pool(&feat_g);
            let (zg, ctx_pg) = proj_g.forward(&pooled);
            let (zg_hat, zg_norms) = l2_normalize_rows(&zg);

            // Local branch: view B -> configured stage -> per-position projection.
            let (y1, y2, y3, ctx_l) = net.forward_train_stages(&xl);
            let local = match spec.local_layer {
                LocalLayer::Stage1 => y1,
                LocalLayer::Stage2 => y2,
                LocalLayer::Stage3 => y3,
            };
            let (nb, lh, lw, ld) = local.dim();
            let grid = lh * lw;
            let local_flat = local
                .to_shape((nb * grid, ld))
                .expect("contiguous reshape")
                .to_owned();
            let (zl, ctx_pl) = proj_l.forward(&local_flat);
            let (zl_hat, zl_norms) = l2_normalize_rows(&zl);

            let pairing = Pairing::dense(nb, grid);
            let (loss, dzg_hat, dzl_hat) =
                infonce_loss_grad(zg_hat.view(), zl_hat.view(), &pairing, tau)?;
            if !loss.is_finite() {
                return Err(Error::Encoder(format!(
                    "non-finite contrastive loss at epoch {epoch}; aborting"
                )));
            }

            // Global path backward.
            let dzg = l2_normalize_backward(&dzg_hat, &zg_hat, &zg_norms);
            let dpooled = proj_g.backward(&dzg, &ctx_pg);
            let dfeat_g = global_avg_pool_backward(&dpooled, gh, gw);
            net.backward(&dfeat_g, &ctx_g);

            // Local path backward, injected at the configured stage.
            let dzl = l2_normalize_backward(&dzl_hat, &zl_hat, &zl_norms);
            let dlocal_flat = proj_l.backward(&dzl, &ctx_pl);
            let dlocal = dlocal_flat
                .to_shape((nb, lh, lw, ld))
                .expect("contiguous reshape")
                .to_owned();
            match spec.local_layer {
                LocalLayer::Stage3 => {
                    net.backward(&dlocal, &ctx_l);
                }
                LocalLayer::Stage2 => {
                    let zero = Array4::<f32>::zeros((nb, gh, gw, d_global));
                    net.backward_with_injections(&zero, Some(&dlocal), None, &ctx_l);
                }
                LocalLayer::Stage1 => {
                    let zero = Array4::<f32>::zeros((nb, gh, gw, d_global));
                    net.backward_with_injections(&zero, None, Some(&dlocal), &ctx_l);
                }
            }

            let mut params = net.params_mut();
            params.push(&mut proj_g.weight);
            params.push(&mut proj_g.bias);
            params.push(&mut proj_l.weight);
            params.push(&mut proj_l.bias);
            opt.step(params);

            epoch_loss += loss as f64;
            batches += 1;
        }
        let mean = (epoch_loss / batches.max(1) as f64) as f32;
        log::info!("dim epoch {epoch}: contrastive loss {mean:.5}");
        epoch_losses.push(mean);
    }

    let mut out_spec = spec.clone();
    out_spec.weights = WeightsKind::SelfSupervisedCheckpoint;
    let encoder = Encoder::from_parts(
        out_spec.clone(),
        net,
        CheckpointManifest {
            spec: out_spec,
            tau: Some(cfg.temperature),
            seed: cfg.seed,
            data_fingerprint: Some(unlabeled.fingerprint()),
        },
    );
    Ok((encoder, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageSample, SplitTag};

    fn toy_pool(n: usize) -> LabeledDataset {
        let samples = (0..n)
            .map(|i| {
                // Half rings, half blobs so there is structure to learn.
                let cls = i % 2;
                let pixels = Raster::from_fn(20, 20, |y, x| {
                    let dy = y as f64 - 10.0;
                    let dx = x as f64 - 10.0;
                    let r = (dy * dy + dx * dx).sqrt();
                    let inside = if cls == 0 { (4.0..7.0).contains(&r) } else { r < 6.0 };
                    if inside {
                        [200, 60 + (i * 7 % 60) as u8, 60]
                    } else {
                        [170, 140 + (i * 5 % 40) as u8, 120]
                    }
                });
                ImageSample {
                    id: format!("p/{i}.png"),
                    pixels,
                    label: 0,
                    class_name: "p".into(),
                    tone_bin: None,
                    source_path: format!("p/{i}.png").into(),
                }
            })
            .collect();
        LabeledDataset::new(samples, vec!["p".into()], SplitTag::Train).unwrap()
    }

    fn tiny_spec() -> EncoderSpec {
        let mut spec = EncoderSpec::micro(EncoderFamily::SelfSupervised, WeightsKind::RandomInit);
        spec.widths = [4, 6, 8];
        spec.input_hw = 16;
        spec
    }

    fn tiny_cfg() -> DimTrainConfig {
        let mut cfg = DimTrainConfig::defaults(16, 7);
        cfg.epochs = 3;
        cfg.batch_size = 8;
        cfg.projection_dim = 16;
        cfg.learning_rate = 2e-3;
        cfg
    }

    #[test]
    fn zero_epochs_returns_initialized_encoder() {
        let pool = toy_pool(8);
        let mut cfg = tiny_cfg();
        cfg.epochs = 0;
        let (enc, losses) = train_dim(&pool, &tiny_spec(), &cfg).unwrap();
        assert!(losses.is_empty());
        assert_eq!(enc.spec.weights, WeightsKind::SelfSupervisedCheckpoint);
        // Identical to a fresh encoder with the same seed.
        let (enc2, _) = train_dim(&pool, &tiny_spec(), &cfg).unwrap();
        assert_eq!(enc.fingerprint(), enc2.fingerprint());
    }

    #[test]
    fn smoke_training_reduces_loss_and_stays_finite() {
        let pool = toy_pool(24);
        let (_, losses) = train_dim(&pool, &tiny_spec(), &tiny_cfg()).unwrap();
        assert_eq!(losses.len(), 3);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(
            losses[losses.len() - 1] <= losses[0],
            "final loss {} should not exceed first {}",
            losses[losses.len() - 1],
            losses[0]
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let pool = toy_pool(12);
        let (a, la) = train_dim(&pool, &tiny_spec(), &tiny_cfg()).unwrap();
        let (b, lb) = train_dim(&pool, &tiny_spec(), &tiny_cfg()).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn intermediate_local_layer_trains() {
        let pool = toy_pool(8);
        let mut spec = tiny_spec();
        spec.local_layer = LocalLayer::Stage2;
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let (enc, losses) = train_dim(&pool, &spec, &cfg).unwrap();
        assert!(losses[0].is_finite());
        let fm = enc.encode(&pool.samples()[0].pixels).unwrap();
        assert_eq!(fm.dims(), (4, 4, 6));
    }

    #[test]
    fn rejects_empty_pool_and_bad_config() {
        let empty = toy_pool(0);
        assert!(train_dim(&empty, &tiny_spec(), &tiny_cfg()).is_err());
        let pool = toy_pool(4);
        let mut cfg = tiny_cfg();
        cfg.batch_size = 1;
        assert!(train_dim(&pool, &tiny_spec(), &cfg).is_err());
        let mut cfg = tiny_cfg();
        cfg.temperature = 0.0;
        assert!(train_dim(&pool, &tiny_spec(), &cfg).is_err());
    }
}
