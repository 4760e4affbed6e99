//! Small residual networks: the encoder backbone, an image classifier head
//! and the convolutional head trained on local feature grids.

use ndarray::{Array2, Array4};
use rand::Rng;

use super::{
    global_avg_pool, global_avg_pool_backward, relu4, relu4_backward, BatchNorm, BatchNormCtx,
    Conv2d, ConvCtx, Linear, LinearCtx, Param, TensorStore,
};
use crate::Result;

/// Two 3x3 convolutions with batch norm and an identity skip connection.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

pub struct ResBlockCtx {
    c1: ConvCtx,
    b1: BatchNormCtx,
    h_act: Array4<f32>,
    c2: ConvCtx,
    b2: BatchNormCtx,
    y: Array4<f32>,
}

impl ResBlock {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(channels, channels, 3, 1, rng),
            bn1: BatchNorm::new(channels),
            conv2: Conv2d::new(channels, channels, 3, 1, rng),
            bn2: BatchNorm::new(channels),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, ResBlockCtx) {
        let (h1, c1) = self.conv1.forward(x);
        let (h2, b1) = self.bn1.forward_train(&h1);
        let h_act = relu4(&h2);
        let (z1, c2) = self.conv2.forward(&h_act);
        let (z2, b2) = self.bn2.forward_train(&z1);
        let y = relu4(&(&z2 + x));
        (
            y.clone(),
            ResBlockCtx {
                c1,
                b1,
                h_act,
                c2,
                b2,
                y,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let (h1, _) = self.conv1.forward(x);
        let h_act = relu4(&self.bn1.forward_eval(&h1));
        let (z1, _) = self.conv2.forward(&h_act);
        let z2 = self.bn2.forward_eval(&z1);
        relu4(&(&z2 + x))
    }

    pub fn backward(&mut self, dy: &Array4<f32>, ctx: &ResBlockCtx) -> Array4<f32> {
        let dsum = relu4_backward(dy, &ctx.y);
        let dz1 = self.bn2.backward(&dsum, &ctx.b2);
        let dh_act = self.conv2.backward(&dz1, &ctx.c2);
        let dh2 = relu4_backward(&dh_act, &ctx.h_act);
        let dh1 = self.bn1.backward(&dh2, &ctx.b1);
        let dx_conv = self.conv1.backward(&dh1, &ctx.c1);
        dx_conv + &dsum
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ]
    }

    fn save(&self, store: &mut TensorStore, prefix: &str) {
        store.put_param(&format!("{prefix}.conv1.w"), &self.conv1.weight);
        store.put_param(&format!("{prefix}.conv1.b"), &self.conv1.bias);
        store.put_param(&format!("{prefix}.conv2.w"), &self.conv2.weight);
        store.put_param(&format!("{prefix}.conv2.b"), &self.conv2.bias);
        save_bn(store, &format!("{prefix}.bn1"), &self.bn1);
        save_bn(store, &format!("{prefix}.bn2"), &self.bn2);
    }

    fn load(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        store.get_param(&format!("{prefix}.conv1.w"), &mut self.conv1.weight)?;
        store.get_param(&format!("{prefix}.conv1.b"), &mut self.conv1.bias)?;
        store.get_param(&format!("{prefix}.conv2.w"), &mut self.conv2.weight)?;
        store.get_param(&format!("{prefix}.conv2.b"), &mut self.conv2.bias)?;
        load_bn(store, &format!("{prefix}.bn1"), &mut self.bn1)?;
        load_bn(store, &format!("{prefix}.bn2"), &mut self.bn2)
    }
}

fn save_bn(store: &mut TensorStore, prefix: &str, bn: &BatchNorm) {
    store.put_param(&format!("{prefix}.gamma"), &bn.gamma);
    store.put_param(&format!("{prefix}.beta"), &bn.beta);
    store.put_vec(&format!("{prefix}.rm"), bn.running_mean.to_vec());
    store.put_vec(&format!("{prefix}.rv"), bn.running_var.to_vec());
}

fn load_bn(store: &TensorStore, prefix: &str, bn: &mut BatchNorm) -> Result<()> {
    store.get_param(&format!("{prefix}.gamma"), &mut bn.gamma)?;
    store.get_param(&format!("{prefix}.beta"), &mut bn.beta)?;
    bn.running_mean = ndarray::Array1::from_vec(store.get_vec(&format!("{prefix}.rm"))?);
    bn.running_var = ndarray::Array1::from_vec(store.get_vec(&format!("{prefix}.rv"))?);
    Ok(())
}

/// Three-stage residual backbone. Each stage halves the spatial resolution,
/// so the final feature grid is input/8 on a side with `widths[2]` channels.
#[derive(Debug, Clone)]
pub struct MicroResNet {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub block1: ResBlock,
    pub down1: Conv2d,
    pub down1_bn: BatchNorm,
    pub block2: ResBlock,
    pub down2: Conv2d,
    pub down2_bn: BatchNorm,
    pub block3: ResBlock,
    pub widths: [usize; 3],
    pub input_hw: usize,
}

pub struct MicroResNetCtx {
    stem_c: ConvCtx,
    stem_b: BatchNormCtx,
    stem_y: Array4<f32>,
    b1: ResBlockCtx,
    d1_c: ConvCtx,
    d1_b: BatchNormCtx,
    d1_y: Array4<f32>,
    b2: ResBlockCtx,
    d2_c: ConvCtx,
    d2_b: BatchNormCtx,
    d2_y: Array4<f32>,
    b3: ResBlockCtx,
}

impl MicroResNet {
    pub fn new(widths: [usize; 3], input_hw: usize, rng: &mut impl Rng) -> Self {
        MicroResNet {
            stem: Conv2d::new(3, widths[0], 3, 2, rng),
            stem_bn: BatchNorm::new(widths[0]),
            block1: ResBlock::new(widths[0], rng),
            down1: Conv2d::new(widths[0], widths[1], 3, 2, rng),
            down1_bn: BatchNorm::new(widths[1]),
            block2: ResBlock::new(widths[1], rng),
            down2: Conv2d::new(widths[1], widths[2], 3, 2, rng),
            down2_bn: BatchNorm::new(widths[2]),
            block3: ResBlock::new(widths[2], rng),
            widths,
            input_hw,
        }
    }

    /// Channels of the final feature grid.
    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }

    /// Side length of the final feature grid for the configured input size.
    pub fn feature_hw(&self) -> usize {
        let mut s = self.input_hw;
        for _ in 0..3 {
            s = s.div_ceil(2);
        }
        s
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, MicroResNetCtx) {
        let (_, _, y3, ctx) = self.forward_train_stages(x);
        (y3, ctx)
    }

    /// Training-mode forward returning every stage's post-block activation.
    pub fn forward_train_stages(
        &mut self,
        x: &Array4<f32>,
    ) -> (Array4<f32>, Array4<f32>, Array4<f32>, MicroResNetCtx) {
        let (s1, stem_c) = self.stem.forward(x);
        let (s2, stem_b) = self.stem_bn.forward_train(&s1);
        let stem_y = relu4(&s2);
        let (y1, b1) = self.block1.forward_train(&stem_y);
        let (d1, d1_c) = self.down1.forward(&y1);
        let (d1n, d1_b) = self.down1_bn.forward_train(&d1);
        let d1_y = relu4(&d1n);
        let (y2, b2) = self.block2.forward_train(&d1_y);
        let (d2, d2_c) = self.down2.forward(&y2);
        let (d2n, d2_b) = self.down2_bn.forward_train(&d2);
        let d2_y = relu4(&d2n);
        let (y3, b3) = self.block3.forward_train(&d2_y);
        (
            y1,
            y2,
            y3,
            MicroResNetCtx {
                stem_c,
                stem_b,
                stem_y,
                b1,
                d1_c,
                d1_b,
                d1_y,
                b2,
                d2_c,
                d2_b,
                d2_y,
                b3,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_eval_stages(x).2
    }

    /// Inference outputs of all three stages (post-block activations).
    pub fn forward_eval_stages(&self, x: &Array4<f32>) -> (Array4<f32>, Array4<f32>, Array4<f32>) {
        let (s1, _) = self.stem.forward(x);
        let stem_y = relu4(&self.stem_bn.forward_eval(&s1));
        let y1 = self.block1.forward_eval(&stem_y);
        let (d1, _) = self.down1.forward(&y1);
        let d1_y = relu4(&self.down1_bn.forward_eval(&d1));
        let y2 = self.block2.forward_eval(&d1_y);
        let (d2, _) = self.down2.forward(&y2);
        let d2_y = relu4(&self.down2_bn.forward_eval(&d2));
        let y3 = self.block3.forward_eval(&d2_y);
        (y1, y2, y3)
    }

    pub fn backward(&mut self, dfeat: &Array4<f32>, ctx: &MicroResNetCtx) -> Array4<f32> {
        self.backward_with_injections(dfeat, None, None, ctx)
    }

    /// Backward from the final stage, optionally adding extra gradients at
    /// the stage-2 and stage-1 outputs (used when an intermediate stage also
    /// feeds a loss, e.g. local contrastive projections).
    pub fn backward_with_injections(
        &mut self,
        dy3: &Array4<f32>,
        inject_y2: Option<&Array4<f32>>,
        inject_y1: Option<&Array4<f32>>,
        ctx: &MicroResNetCtx,
    ) -> Array4<f32> {
        let d = self.block3.backward(dy3, &ctx.b3);
        let d = relu4_backward(&d, &ctx.d2_y);
        let d = self.down2_bn.backward(&d, &ctx.d2_b);
        let mut d = self.down2.backward(&d, &ctx.d2_c);
        if let Some(extra) = inject_y2 {
            d += extra;
        }
        let d = self.block2.backward(&d, &ctx.b2);
        let d = relu4_backward(&d, &ctx.d1_y);
        let d = self.down1_bn.backward(&d, &ctx.d1_b);
        let mut d = self.down1.backward(&d, &ctx.d1_c);
        if let Some(extra) = inject_y1 {
            d += extra;
        }
        let d = self.block1.backward(&d, &ctx.b1);
        let d = relu4_backward(&d, &ctx.stem_y);
        let d = self.stem_bn.backward(&d, &ctx.stem_b);
        self.stem.backward(&d, &ctx.stem_c)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.stem.weight, &mut self.stem.bias];
        ps.push(&mut self.stem_bn.gamma);
        ps.push(&mut self.stem_bn.beta);
        ps.extend(self.block1.params_mut());
        ps.push(&mut self.down1.weight);
        ps.push(&mut self.down1.bias);
        ps.push(&mut self.down1_bn.gamma);
        ps.push(&mut self.down1_bn.beta);
        ps.extend(self.block2.params_mut());
        ps.push(&mut self.down2.weight);
        ps.push(&mut self.down2.bias);
        ps.push(&mut self.down2_bn.gamma);
        ps.push(&mut self.down2_bn.beta);
        ps.extend(self.block3.params_mut());
        ps
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn save_store(&self, store: &mut TensorStore) {
        store.put_param("stem.w", &self.stem.weight);
        store.put_param("stem.b", &self.stem.bias);
        save_bn(store, "stem_bn", &self.stem_bn);
        self.block1.save(store, "block1");
        store.put_param("down1.w", &self.down1.weight);
        store.put_param("down1.b", &self.down1.bias);
        save_bn(store, "down1_bn", &self.down1_bn);
        self.block2.save(store, "block2");
        store.put_param("down2.w", &self.down2.weight);
        store.put_param("down2.b", &self.down2.bias);
        save_bn(store, "down2_bn", &self.down2_bn);
        self.block3.save(store, "block3");
    }

    pub fn load_store(&mut self, store: &TensorStore) -> Result<()> {
        store.get_param("stem.w", &mut self.stem.weight)?;
        store.get_param("stem.b", &mut self.stem.bias)?;
        load_bn(store, "stem_bn", &mut self.stem_bn)?;
        self.block1.load(store, "block1")?;
        store.get_param("down1.w", &mut self.down1.weight)?;
        store.get_param("down1.b", &mut self.down1.bias)?;
        load_bn(store, "down1_bn", &mut self.down1_bn)?;
        self.block2.load(store, "block2")?;
        store.get_param("down2.w", &mut self.down2.weight)?;
        store.get_param("down2.b", &mut self.down2.bias)?;
        load_bn(store, "down2_bn", &mut self.down2_bn)?;
        self.block3.load(store, "block3")
    }
}

/// Backbone plus global pooling and a linear classifier.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub backbone: MicroResNet,
    pub fc: Linear,
}

pub struct ClassifierOutCtx {
    backbone: MicroResNetCtx,
    feat_hw: (usize, usize),
    fc: LinearCtx,
}

impl ClassifierNet {
    pub fn new(backbone: MicroResNet, n_classes: usize, rng: &mut impl Rng) -> Self {
        let fc = Linear::new(backbone.feature_dim(), n_classes, rng);
        ClassifierNet { backbone, fc }
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array2<f32>, ClassifierOutCtx) {
        let (feat, backbone) = self.backbone.forward_train(x);
        let (_, fh, fw, _) = feat.dim();
        let pooled = global_avg_pool(&feat);
        let (logits, fc) = self.fc.forward(&pooled);
        (
            logits,
            ClassifierOutCtx {
                backbone,
                feat_hw: (fh, fw),
                fc,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array2<f32> {
        let feat = self.backbone.forward_eval(x);
        let pooled = global_avg_pool(&feat);
        let (logits, _) = self.fc.forward(&pooled);
        logits
    }

    pub fn backward(&mut self, dlogits: &Array2<f32>, ctx: &ClassifierOutCtx) {
        let dpooled = self.fc.backward(dlogits, &ctx.fc);
        let dfeat = global_avg_pool_backward(&dpooled, ctx.feat_hw.0, ctx.feat_hw.1);
        let _ = self.backbone.backward(&dfeat, &ctx.backbone);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.backbone.params_mut();
        ps.push(&mut self.fc.weight);
        ps.push(&mut self.fc.bias);
        ps
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Residual head trained on frozen local feature grids.
#[derive(Debug, Clone)]
pub struct LocalHeadNet {
    pub block: ResBlock,
    pub fc: Linear,
    pub d: usize,
}

pub struct LocalHeadNetCtx {
    block: ResBlockCtx,
    feat_hw: (usize, usize),
    fc: LinearCtx,
}

impl LocalHeadNet {
    pub fn new(d: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        LocalHeadNet {
            block: ResBlock::new(d, rng),
            fc: Linear::new(d, n_classes, rng),
            d,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array2<f32>, LocalHeadNetCtx) {
        let (feat, block) = self.block.forward_train(x);
        let (_, fh, fw, _) = feat.dim();
        let pooled = global_avg_pool(&feat);
        let (logits, fc) = self.fc.forward(&pooled);
        (
            logits,
            LocalHeadNetCtx {
                block,
                feat_hw: (fh, fw),
                fc,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array2<f32> {
        let feat = self.block.forward_eval(x);
        let pooled = global_avg_pool(&feat);
        let (logits, _) = self.fc.forward(&pooled);
        logits
    }

    pub fn backward(&mut self, dlogits: &Array2<f32>, ctx: &LocalHeadNetCtx) {
        let dpooled = self.fc.backward(dlogits, &ctx.fc);
        let dfeat = global_avg_pool_backward(&dpooled, ctx.feat_hw.0, ctx.feat_hw.1);
        let _ = self.block.backward(&dfeat, &ctx.block);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.block.params_mut();
        ps.push(&mut self.fc.weight);
        ps.push(&mut self.fc.bias);
        ps
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax_cross_entropy, Adam};
    use crate::util;

    #[test]
    fn feature_grid_dims() {
        let mut rng = util::rng_for(5, &[0]);
        let net = MicroResNet::new([8, 12, 16], 32, &mut rng);
        assert_eq!(net.feature_hw(), 4);
        assert_eq!(net.feature_dim(), 16);
        let x = Array4::zeros((2, 32, 32, 3));
        let y = net.forward_eval(&x);
        assert_eq!(y.dim(), (2, 4, 4, 16));
        // All-zero input stays finite.
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = util::rng_for(6, &[0]);
        let net = MicroResNet::new([4, 6, 8], 16, &mut rng);
        let x = Array4::from_shape_fn((1, 16, 16, 3), |(_, i, j, c)| {
            ((i * 16 + j + c) % 11) as f32 * 0.1
        });
        let a = net.forward_eval(&x);
        let b = net.forward_eval(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn classifier_overfits_tiny_problem() {
        let mut rng = util::rng_for(7, &[0]);
        let backbone = MicroResNet::new([4, 6, 8], 16, &mut rng);
        let mut net = ClassifierNet::new(backbone, 2, &mut rng);
        // Two clearly different patterns.
        let x = Array4::from_shape_fn((6, 16, 16, 3), |(b, i, j, _)| {
            if b % 2 == 0 {
                if i < 8 { 1.0 } else { -1.0 }
            } else if j < 8 {
                1.0
            } else {
                -1.0
            }
        });
        let y: Vec<usize> = (0..6).map(|b| b % 2).collect();
        let mut opt = Adam::new(3e-3);
        let mut last = f32::INFINITY;
        for _ in 0..60 {
            net.zero_grad();
            let (logits, ctx) = net.forward_train(&x);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y);
            net.backward(&dlogits, &ctx);
            opt.step(net.params_mut());
            last = loss;
        }
        assert!(last < 0.1, "training loss stayed at {last}");
        let logits = net.forward_eval(&x);
        let preds = crate::nn::argmax_rows(&logits);
        assert_eq!(preds, y);
    }

    #[test]
    fn store_roundtrip_preserves_eval_output() {
        let mut rng = util::rng_for(8, &[0]);
        let mut net = MicroResNet::new([4, 6, 8], 16, &mut rng);
        // Push the BN running stats away from their init.
        let x = Array4::from_shape_fn((4, 16, 16, 3), |(b, i, j, c)| {
            ((b * 97 + i * 31 + j * 7 + c) % 23) as f32 * 0.05
        });
        let _ = net.forward_train(&x);
        let mut store = TensorStore::new();
        net.save_store(&mut store);
        let bytes = store.to_bytes();

        let mut rng2 = util::rng_for(999, &[0]);
        let mut restored = MicroResNet::new([4, 6, 8], 16, &mut rng2);
        restored.load_store(&TensorStore::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(net.forward_eval(&x), restored.forward_eval(&x));
    }
}
