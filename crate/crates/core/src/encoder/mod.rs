//! Encoders: local feature maps and global embeddings from images.
//!
//! Two families back the benchmark's method matrix: a discriminative
//! backbone (supervised pretraining, also the fine-tune baseline's starting
//! point) and a self-supervised backbone trained with the mutual-information
//! contrastive objective in [`infonce`]. Encoders are immutable after
//! load/training; encoding is a pure function of (weights, image).

mod dim;
mod infonce;
mod pretrain;

pub use dim::{train_dim, DimTrainConfig};
pub use infonce::{infonce_loss, infonce_loss_grad, Pairing};
pub use pretrain::{pretrain_supervised, PretrainConfig};

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Raster};
use crate::nn::{MicroResNet, TensorStore};
use crate::util;
use crate::{Error, Result};

/// Forward passes run over chunks of this many images.
const ENCODE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    Discriminative,
    SelfSupervised,
}

/// Which backbone stage provides the "local" feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalLayer {
    Stage1,
    Stage2,
    #[default]
    Stage3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsKind {
    PretrainedSupervised,
    SelfSupervisedCheckpoint,
    RandomInit,
}

/// Declarative description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    /// Architecture family name; "micro" is the built-in residual backbone.
    pub backbone_id: String,
    pub widths: [usize; 3],
    /// Square input resolution images are resized to at encode time.
    pub input_hw: usize,
    pub local_layer: LocalLayer,
    pub weights: WeightsKind,
}

impl EncoderSpec {
    pub fn micro(family: EncoderFamily, weights: WeightsKind) -> Self {
        EncoderSpec {
            family,
            backbone_id: "micro".into(),
            widths: [16, 32, 64],
            input_hw: 32,
            local_layer: LocalLayer::Stage3,
            weights,
        }
    }

    /// Dimension of the local feature vectors (and of global embeddings when
    /// the local layer is the final stage).
    pub fn embed_dim(&self) -> usize {
        match self.local_layer {
            LocalLayer::Stage1 => self.widths[0],
            LocalLayer::Stage2 => self.widths[1],
            LocalLayer::Stage3 => self.widths[2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_id != "micro" {
            return Err(Error::Encoder(format!(
                "unsupported backbone {:?}; this build provides \"micro\"",
                self.backbone_id
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Encoder("backbone widths must be positive".into()));
        }
        if self.input_hw < 8 {
            return Err(Error::Encoder("encoder input size must be >= 8".into()));
        }
        if self.family == EncoderFamily::SelfSupervised
            && self.weights == WeightsKind::PretrainedSupervised
        {
            return Err(Error::Encoder(
                "self-supervised encoders take a checkpoint or training, not supervised weights"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Spatial grid of feature vectors: (H', W', D).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: Array3<f32>,
}

impl FeatureMap {
    pub fn new(grid: Array3<f32>) -> Result<Self> {
        let (h, w, _) = grid.dim();
        if h == 0 || w == 0 {
            return Err(Error::Encoder("feature map must have a non-empty grid".into()));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Encoder("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { grid })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.grid.dim()
    }
}

/// Pooled D-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding {
    pub vec: Array1<f32>,
}

/// Mean over grid positions of each feature dimension.
pub fn global_pool(fm: &FeatureMap) -> GlobalEmbedding {
    let (h, w, d) = fm.dims();
    let mut vec = Array1::<f32>::zeros(d);
    let scale = 1.0 / (h * w) as f32;
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                vec[k] += fm.grid[[i, j, k]] * scale;
            }
        }
    }
    GlobalEmbedding { vec }
}

/// Manifest embedded in every checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: EncoderSpec,
    /// Contrastive temperature for self-supervised checkpoints.
    pub tau: Option<f64>,
    pub seed: u64,
    /// Fingerprint of the dataset the weights were trained on, if any.
    pub data_fingerprint: Option<String>,
}

const CKPT_MAGIC: &[u8; 4] = b"LSCK";
const CKPT_VERSION: u32 = 1;

/// A loaded encoder: spec plus backbone weights.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub manifest: CheckpointManifest,
    net: MicroResNet,
}

impl Encoder {
    /// Freshly initialised weights (the `random_init` weights source).
    pub fn random_init(mut spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.weights = WeightsKind::RandomInit;
        spec.validate()?;
        let mut rng = util::rng_for(seed, &[0xe4c0de]);
        let net = MicroResNet::new(spec.widths, spec.input_hw, &mut rng);
        Ok(Encoder {
            manifest: CheckpointManifest {
                spec: spec.clone(),
                tau: None,
                seed,
                data_fingerprint: None,
            },
            spec,
            net,
        })
    }

    pub(crate) fn from_parts(spec: EncoderSpec, net: MicroResNet, manifest: CheckpointManifest) -> Self {
        Encoder {
            spec,
            manifest,
            net,
        }
    }

    pub fn net(&self) -> &MicroResNet {
        &self.net
    }

    /// Fingerprint of the weight tensors; keys embedding caches.
    pub fn fingerprint(&self) -> String {
        let mut store = TensorStore::new();
        self.net.save_store(&mut store);
        util::sha256_hex(&store.to_bytes())
    }

    /// Resize to the encoder resolution and scale channels to [-1, 1].
    pub fn raster_to_input(&self, img: &Raster) -> Array3<f32> {
        input_from_raster(img, self.spec.input_hw)
    }

    fn batch_inputs(&self, imgs: &[&Raster]) -> Array4<f32> {
        inputs_batch(imgs, self.spec.input_hw)
    }

    fn pick_stage(
        &self,
        stages: (Array4<f32>, Array4<f32>, Array4<f32>),
    ) -> (Array4<f32>, Array4<f32>) {
        let (s1, s2, s3) = stages;
        let local = match self.spec.local_layer {
            LocalLayer::Stage1 => s1,
            LocalLayer::Stage2 => s2,
            LocalLayer::Stage3 => s3.clone(),
        };
        (local, s3)
    }

    /// Local feature map of one image (inference mode, deterministic).
    pub fn encode(&self, img: &Raster) -> Result<FeatureMap> {
        let batch = self.batch_inputs(&[img]);
        let (local, _) = self.pick_stage(self.net.forward_eval_stages(&batch));
        FeatureMap::new(local.index_axis(Axis(0), 0).to_owned())
    }

    /// Local grids for a whole dataset, stacked (N, H', W', D).
    pub fn encode_local_batch(&self, imgs: &[&Raster]) -> Result<Array4<f32>> {
        let chunks: Vec<Vec<&Raster>> = imgs
            .chunks(ENCODE_BATCH)
            .map(|c| c.to_vec())
            .collect();
        let outs: Vec<Array4<f32>> = chunks
            .par_iter()
            .map(|chunk| {
                let batch = self.batch_inputs(chunk);
                self.pick_stage(self.net.forward_eval_stages(&batch)).0
            })
            .collect();
        concat_batches(outs, imgs.len())
    }

    /// Pooled final-stage embeddings for a whole dataset, stacked (N, D).
    pub fn encode_global_batch(&self, imgs: &[&Raster]) -> Result<Array2<f32>> {
        let chunks: Vec<Vec<&Raster>> = imgs
            .chunks(ENCODE_BATCH)
            .map(|c| c.to_vec())
            .collect();
        let outs: Vec<Array2<f32>> = chunks
            .par_iter()
            .map(|chunk| {
                let batch = self.batch_inputs(chunk);
                let (_, _, s3) = self.net.forward_eval_stages(&batch);
                crate::nn::global_avg_pool(&s3)
            })
            .collect();
        let total: usize = outs.iter().map(|o| o.nrows()).sum();
        debug_assert_eq!(total, imgs.len());
        let d = outs.first().map(|o| o.ncols()).unwrap_or(self.spec.widths[2]);
        let mut stacked = Array2::<f32>::zeros((imgs.len(), d));
        let mut at = 0;
        for o in outs {
            let n = o.nrows();
            stacked.slice_mut(ndarray::s![at..at + n, ..]).assign(&o);
            at += n;
        }
        Ok(stacked)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let manifest =
            serde_json::to_vec(&self.manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut store = TensorStore::new();
        self.net.save_store(&mut store);
        let tensors = store.to_bytes();

        let mut bytes = Vec::with_capacity(tensors.len() + manifest.len() + 16);
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&manifest);
        bytes.extend_from_slice(&tensors);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[0..4] != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not an encoder checkpoint",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..16 + mlen])
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint manifest: {e}")))?;
        manifest.spec.validate()?;
        let store = TensorStore::from_bytes(&bytes[16 + mlen..])?;
        let mut rng = util::rng_for(0, &[0]);
        let mut net = MicroResNet::new(manifest.spec.widths, manifest.spec.input_hw, &mut rng);
        net.load_store(&store)?;
        Ok(Encoder {
            spec: manifest.spec.clone(),
            manifest,
            net,
        })
    }
}

/// Resize a raster to a square `hw` input and scale channels to [-1, 1].
pub(crate) fn input_from_raster(img: &Raster, hw: usize) -> Array3<f32> {
    let r = img.resize_bilinear(hw, hw);
    Array3::from_shape_fn((hw, hw, 3), |(y, x, c)| {
        (r.get(y, x)[c] as f32 / 255.0 - 0.5) / 0.5
    })
}

/// Stack rasters into one (N, hw, hw, 3) input batch.
pub(crate) fn inputs_batch(imgs: &[&Raster], hw: usize) -> Array4<f32> {
    let mut batch = Array4::<f32>::zeros((imgs.len(), hw, hw, 3));
    for (i, img) in imgs.iter().enumerate() {
        batch
            .index_axis_mut(Axis(0), i)
            .assign(&input_from_raster(img, hw));
    }
    batch
}

fn concat_batches(outs: Vec<Array4<f32>>, total: usize) -> Result<Array4<f32>> {
    let (_, h, w, d) = outs
        .first()
        .map(|o| o.dim())
        .ok_or_else(|| Error::Encoder("cannot stack an empty batch list".into()))?;
    let mut stacked = Array4::<f32>::zeros((total, h, w, d));
    let mut at = 0;
    for o in outs {
        let n = o.dim().0;
        stacked
            .slice_mut(ndarray::s![at..at + n, .., .., ..])
            .assign(&o);
        at += n;
    }
    Ok(stacked)
}

/// Which representation [`embed_dataset`] extracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    Global,
    Local,
}

/// Dataset embeddings with row i corresponding to `ds.samples()[i]`.
pub enum EmbeddedDataset {
    /// (N, D) pooled embeddings.
    Global(Array2<f32>),
    /// (N, H', W', D) local grids.
    Local(Array4<f32>),
}

/// Embed every sample of a dataset; labels come back index-aligned.
pub fn embed_dataset(
    enc: &Encoder,
    ds: &LabeledDataset,
    mode: EmbedMode,
) -> Result<(EmbeddedDataset, Vec<usize>)> {
    let imgs: Vec<&Raster> = ds.samples().iter().map(|s| &s.pixels).collect();
    let labels = ds.labels();
    if imgs.is_empty() {
        let d = enc.spec.embed_dim();
        let hw = grid_side(enc);
        return Ok((
            match mode {
                EmbedMode::Global => EmbeddedDataset::Global(Array2::zeros((0, enc.spec.widths[2]))),
                EmbedMode::Local => EmbeddedDataset::Local(Array4::zeros((0, hw, hw, d))),
            },
            labels,
        ));
    }
    let embedded = match mode {
        EmbedMode::Global => EmbeddedDataset::Global(enc.encode_global_batch(&imgs)?),
        EmbedMode::Local => EmbeddedDataset::Local(enc.encode_local_batch(&imgs)?),
    };
    Ok((embedded, labels))
}

fn grid_side(enc: &Encoder) -> usize {
    let mut s = enc.spec.input_hw;
    let halvings = match enc.spec.local_layer {
        LocalLayer::Stage1 => 1,
        LocalLayer::Stage2 => 2,
        LocalLayer::Stage3 => 3,
    };
    for _ in 0..halvings {
        s = s.div_ceil(2);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageSample, SplitTag};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn test_encoder() -> Encoder {
        let mut spec = EncoderSpec::micro(EncoderFamily::Discriminative, WeightsKind::RandomInit);
        spec.widths = [4, 6, 8];
        spec.input_hw = 16;
        Encoder::random_init(spec, 42).unwrap()
    }

    fn toy_raster(v: u8) -> Raster {
        Raster::from_fn(20, 24, |y, x| [(y * 7 + x) as u8, v, (x * 3) as u8])
    }

    #[test]
    fn encode_is_deterministic_with_fixed_shape() {
        let enc = test_encoder();
        let img = toy_raster(9);
        let a = enc.encode(&img).unwrap();
        let b = enc.encode(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (2, 2, 8));
        let other = enc.encode(&toy_raster(200)).unwrap();
        assert_eq!(other.dims(), (2, 2, 8));
    }

    #[test]
    fn zero_input_is_finite() {
        let enc = test_encoder();
        let img = Raster::filled(16, 16, [0, 0, 0]);
        let fm = enc.encode(&img).unwrap();
        assert!(fm.grid.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn global_pool_identities() {
        // Constant grid pools to the constant vector.
        let c = array![1.5f32, -2.0, 0.25];
        let grid = Array3::from_shape_fn((3, 4, 3), |(_, _, k)| c[k]);
        let pooled = global_pool(&FeatureMap::new(grid).unwrap());
        for k in 0..3 {
            assert_relative_eq!(pooled.vec[k], c[k], epsilon = 1e-6);
        }
        // 2x2 grid of 2-d vectors {(1,2),(3,4),(5,6),(7,8)} -> (4,5).
        let grid = Array3::from_shape_vec((2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let pooled = global_pool(&FeatureMap::new(grid).unwrap());
        assert_relative_eq!(pooled.vec[0], 4.0, epsilon = 1e-6);
        assert_relative_eq!(pooled.vec[1], 5.0, epsilon = 1e-6);
    }

    #[test]
    fn global_pool_permutation_invariance_and_linearity() {
        let mut rng = util::rng_for(21, &[0]);
        use rand::Rng;
        let a = Array3::from_shape_fn((2, 3, 4), |_| rng.gen_range(-1.0f32..1.0));
        let b = Array3::from_shape_fn((2, 3, 4), |_| rng.gen_range(-1.0f32..1.0));
        // Permute positions of `a`: transpose the grid axes.
        let permuted = a.clone().permuted_axes([1, 0, 2]).to_owned();
        let pa = global_pool(&FeatureMap::new(a.clone()).unwrap());
        let pp = global_pool(&FeatureMap::new(permuted).unwrap());
        for k in 0..4 {
            assert_relative_eq!(pa.vec[k], pp.vec[k], epsilon = 1e-6);
        }
        // Linearity: pool(2a + 3b) = 2 pool(a) + 3 pool(b).
        let lin = a.mapv(|v| 2.0 * v) + &b.mapv(|v| 3.0 * v);
        let pl = global_pool(&FeatureMap::new(lin).unwrap());
        let pb = global_pool(&FeatureMap::new(b).unwrap());
        for k in 0..4 {
            assert_relative_eq!(pl.vec[k], 2.0 * pa.vec[k] + 3.0 * pb.vec[k], epsilon = 1e-5);
        }
    }

    fn tiny_dataset(n: usize) -> LabeledDataset {
        let samples = (0..n)
            .map(|i| ImageSample {
                id: format!("c/{i}.png"),
                pixels: toy_raster(i as u8),
                label: 0,
                class_name: "c".into(),
                tone_bin: None,
                source_path: format!("c/{i}.png").into(),
            })
            .collect();
        LabeledDataset::new(samples, vec!["c".into()], SplitTag::Full).unwrap()
    }

    #[test]
    fn embed_dataset_shapes_and_order() {
        let enc = test_encoder();
        let ds = tiny_dataset(5);
        let (emb, labels) = embed_dataset(&enc, &ds, EmbedMode::Global).unwrap();
        let EmbeddedDataset::Global(g) = emb else {
            panic!("expected global embeddings")
        };
        assert_eq!(g.dim(), (5, 8));
        assert_eq!(labels.len(), 5);

        // Per-row equality with single-image encoding.
        let single = enc.encode(&ds.samples()[3].pixels).unwrap();
        let pooled = global_pool(&single);
        for k in 0..8 {
            assert_relative_eq!(g[[3, k]], pooled.vec[k], epsilon = 1e-5);
        }
    }

    #[test]
    fn embed_empty_dataset_is_empty_not_error() {
        let enc = test_encoder();
        let ds = tiny_dataset(0);
        let (emb, labels) = embed_dataset(&enc, &ds, EmbedMode::Global).unwrap();
        let EmbeddedDataset::Global(g) = emb else {
            panic!("expected global embeddings")
        };
        assert_eq!(g.nrows(), 0);
        assert!(labels.is_empty());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let enc = test_encoder();
        enc.save_checkpoint(&path).unwrap();
        let back = Encoder::load_checkpoint(&path).unwrap();
        let img = toy_raster(77);
        assert_eq!(enc.encode(&img).unwrap(), back.encode(&img).unwrap());
        assert_eq!(enc.fingerprint(), back.fingerprint());
    }

    #[test]
    fn bad_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Encoder::load_checkpoint(&path).is_err());
        assert!(Encoder::load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = EncoderSpec::micro(EncoderFamily::SelfSupervised, WeightsKind::PretrainedSupervised);
        assert!(spec.validate().is_err());
        spec.weights = WeightsKind::RandomInit;
        spec.backbone_id = "resnet50".into();
        assert!(spec.validate().is_err());
    }
}
