//! Conditional GAN that maps coarse 256×256 renderings of triangle
//! reconstructions to sharp conductivity images.
//!
//! The generator is a U-net: five stages of two 3×3 convolutions with batch
//! normalization and ReLU, each followed by 2×2 max pooling, then four
//! stride-2 transposed convolutions that join the encoder features of the
//! same scale. A final nearest-neighbour up-sampling restores 256×256, joins
//! the first stage features and a 3×3 convolution with a sigmoid produces
//! the image. The discriminator is a PatchGAN scoring 16×16 patches of the
//! (condition, candidate) pair.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{rasterize_phantom_to_image, FieldImage, Phantom, TriMesh, TriVector, IMAGE_SIZE};
use crate::metrics::{render_smoothed, score_image, Mask};
use crate::nn::{
    restore, snapshot, zero_grads, Adam, AdamConfig, BatchNorm, Conv2d, ConvGeometry, ConvTranspose2d, LeakyRelu,
    MaxPool2d, Module, Param, Relu, Sigmoid, Tensor, Upsample2x,
};
use crate::{parallel, rng};

/// Distance penalizing the generator output against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionNorm {
    /// `√Σ(x̃ − t)²` per image.
    L2,
    /// `Σ|x̃ − t|` per image.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Channels of the five generator stages.
    pub generator_widths: [usize; 5],
    /// Channels of the four stride-2 discriminator blocks.
    pub discriminator_widths: [usize; 4],
    pub lambda: f64,
    pub reconstruction: ReconstructionNorm,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Pairs drawn per epoch; all pairs when `None`.
    pub pairs_per_epoch: Option<usize>,
    /// Validation pairs scored after each epoch for model selection.
    pub validation_pairs: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            generator_widths: [32, 64, 128, 256, 512],
            discriminator_widths: [64, 128, 256, 512],
            lambda: 100.0,
            reconstruction: ReconstructionNorm::L2,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 16,
            pairs_per_epoch: None,
            validation_pairs: 64,
            threshold: 0.5,
            seed: 42,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generator_widths.contains(&0) || self.discriminator_widths.contains(&0) {
            return Err(Error::Config("GAN widths must be nonzero".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::Config("pairs_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

const CONV3: ConvGeometry = ConvGeometry::new(3, 1, 1);
const DOWN4: ConvGeometry = ConvGeometry::new(4, 2, 1);
const UP2: ConvGeometry = ConvGeometry::new(2, 2, 0);

/// A convolution (or transposed convolution) with batch normalization and
/// an activation.
#[derive(Debug, Clone)]
pub struct ConvBlock<C, A> {
    pub conv: C,
    pub norm: Option<BatchNorm>,
    pub act: A,
}

impl<C: Module, A: Module> Module for ConvBlock<C, A> {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = self.conv.forward(x, train);
        if let Some(n) = &mut self.norm {
            h = n.forward(&h, train);
        }
        self.act.forward(&h, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut g = self.act.backward(g);
        if let Some(n) = &mut self.norm {
            g = n.backward(&g);
        }
        self.conv.backward(&g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        if let Some(n) = &mut self.norm {
            v.extend(n.params_mut());
        }
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv.params();
        if let Some(n) = &self.norm {
            v.extend(n.params());
        }
        v
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        self.norm.as_ref().map(|n| n.buffers()).unwrap_or_default()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.norm.as_mut().map(|n| n.buffers_mut()).unwrap_or_default()
    }
}

type EncBlock = ConvBlock<Conv2d, Relu>;
type UpBlock = ConvBlock<ConvTranspose2d, Relu>;
type DiscBlock = ConvBlock<Conv2d, LeakyRelu>;

fn enc_block(cin: usize, cout: usize, r: &mut rng::Rng) -> EncBlock {
    ConvBlock {
        conv: Conv2d::new(cin, cout, CONV3, r),
        norm: Some(BatchNorm::new(cout)),
        act: Relu::default(),
    }
}

/// Image-to-image generator on `[n, 1, s, s]` batches, `s` a multiple of 32.
#[derive(Debug, Clone)]
pub struct Generator {
    pub widths: [usize; 5],
    enc: Vec<EncBlock>,
    pools: Vec<MaxPool2d>,
    ups: Vec<UpBlock>,
    last_up: Upsample2x,
    out_conv: Conv2d,
    out: Sigmoid,
    /// Channel counts of the decoder inputs before each join, for backward.
    joins: Vec<usize>,
}

pub fn build_generator(cfg: &GanConfig) -> Result<Generator> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "gan-generator-init", 0);
    let w = cfg.generator_widths;
    let mut enc = Vec::with_capacity(10);
    let mut cin = 1;
    for &wi in &w {
        enc.push(enc_block(cin, wi, &mut r));
        enc.push(enc_block(wi, wi, &mut r));
        cin = wi;
    }
    // 8 → 16 → 32 → 64 → 128, joining the stage-4 … stage-1 features
    let mut ups = Vec::with_capacity(4);
    let mut joins = Vec::with_capacity(4);
    for k in 0..4 {
        let target = w[4 - k];
        ups.push(ConvBlock {
            conv: ConvTranspose2d::new(cin, target, UP2, &mut r),
            norm: Some(BatchNorm::new(target)),
            act: Relu::default(),
        });
        joins.push(target);
        cin = 2 * target;
    }
    let out_conv = Conv2d::new(cin + w[0], 1, CONV3, &mut r);
    Ok(Generator {
        widths: w,
        enc,
        pools: (0..5).map(|_| MaxPool2d::new(2)).collect(),
        ups,
        last_up: Upsample2x::new(),
        out_conv,
        out: Sigmoid::default(),
        joins,
    })
}

impl Module for Generator {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.c(), 1, "generator input is one channel");
        assert!(
            x.h() % 32 == 0 && x.w() % 32 == 0,
            "generator input must be a multiple of 32"
        );
        let mut skips = Vec::with_capacity(5);
        let mut h = x.clone();
        for s in 0..5 {
            h = self.enc[2 * s].forward(&h, train);
            h = self.enc[2 * s + 1].forward(&h, train);
            skips.push(h.clone());
            h = self.pools[s].forward(&h, train);
        }
        for k in 0..4 {
            h = self.ups[k].forward(&h, train);
            h = Tensor::concat_channels(&h, &skips[4 - k]);
        }
        h = self.last_up.forward(&h, train);
        h = Tensor::concat_channels(&h, &skips[0]);
        let y = self.out_conv.forward(&h, train);
        self.out.forward(&y, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.out.backward(g);
        let g = self.out_conv.backward(&g);
        let (g_up, g_skip0) = g.split_channels(g.c() - self.widths[0]);
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; 5];
        skip_grads[0] = Some(g_skip0);
        let mut g = self.last_up.backward(&g_up);
        for k in (0..4).rev() {
            let (g_up, g_skip) = g.split_channels(self.joins[k]);
            skip_grads[4 - k] = Some(g_skip);
            g = self.ups[k].backward(&g_up);
        }
        for s in (0..5).rev() {
            g = self.pools[s].backward(&g);
            g.add_assign(skip_grads[s].as_ref().expect("skip gradient"));
            g = self.enc[2 * s + 1].backward(&g);
            g = self.enc[2 * s].backward(&g);
        }
        g
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.enc.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.ups.iter_mut().flat_map(|b| b.params_mut()));
        v.extend(self.out_conv.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.enc.iter().flat_map(|b| b.params()).collect();
        v.extend(self.ups.iter().flat_map(|b| b.params()));
        v.extend(self.out_conv.params());
        v
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut v: Vec<&Vec<f64>> = self.enc.iter().flat_map(|b| b.buffers()).collect();
        v.extend(self.ups.iter().flat_map(|b| b.buffers()));
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = self.enc.iter_mut().flat_map(|b| b.buffers_mut()).collect();
        v.extend(self.ups.iter_mut().flat_map(|b| b.buffers_mut()));
        v
    }
}

/// PatchGAN on `[n, 2, s, s]` (condition, candidate) batches; outputs
/// `[n, 1, s/16, s/16]` probabilities of being real.
#[derive(Debug, Clone)]
pub struct Discriminator {
    blocks: Vec<DiscBlock>,
    score: Conv2d,
    out: Sigmoid,
}

pub fn build_discriminator(cfg: &GanConfig) -> Result<Discriminator> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "gan-discriminator-init", 0);
    let mut blocks = Vec::with_capacity(4);
    let mut cin = 2;
    for (i, &w) in cfg.discriminator_widths.iter().enumerate() {
        blocks.push(ConvBlock {
            conv: Conv2d::new(cin, w, DOWN4, &mut r),
            norm: (i > 0).then(|| BatchNorm::new(w)),
            act: LeakyRelu::new(0.2),
        });
        cin = w;
    }
    Ok(Discriminator {
        blocks,
        score: Conv2d::new(cin, 1, CONV3, &mut r),
        out: Sigmoid::default(),
    })
}

impl Module for Discriminator {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.c(), 2, "discriminator input is a (condition, candidate) pair");
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, train);
        }
        let y = self.score.forward(&h, train);
        self.out.forward(&y, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.out.backward(g);
        let mut g = self.score.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        g
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.score.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.score.params());
        v
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        self.blocks.iter().flat_map(|b| b.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.blocks.iter_mut().flat_map(|b| b.buffers_mut()).collect()
    }
}

const LOG_EPS: f64 = 1e-7;

fn clip(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    /// `−mean log D(x|y) − mean log(1 − D(x̃|y))`.
    pub discriminator: f64,
    /// `−mean log D(x̃|y)`.
    pub adversarial: f64,
    /// Mean over images of the reconstruction distance.
    pub reconstruction: f64,
    /// `adversarial + λ·reconstruction`.
    pub generator: f64,
}

fn distance(d: &[f64], norm: ReconstructionNorm) -> f64 {
    match norm {
        ReconstructionNorm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
        ReconstructionNorm::L1 => d.iter().map(|v| v.abs()).sum(),
    }
}

/// Generator and discriminator objectives. `fake` and `truth` are
/// `[n, 1, s, s]` images; the score maps are patch probabilities.
pub fn gan_losses(
    d_real: &Tensor,
    d_fake: &Tensor,
    fake: &Tensor,
    truth: &Tensor,
    lambda: f64,
    norm: ReconstructionNorm,
) -> Result<GanLosses> {
    if d_real.shape != d_fake.shape || fake.shape != truth.shape || fake.n() != d_fake.n() {
        return Err(Error::shape(
            format!("{:?} scores, {:?} images", d_real.shape, truth.shape),
            format!("{:?} scores, {:?} images", d_fake.shape, fake.shape),
        ));
    }
    let m = d_real.data.len() as f64;
    let real_term = -d_real.data.iter().map(|&p| clip(p).ln()).sum::<f64>() / m;
    let fake_term = -d_fake.data.iter().map(|&p| (1.0 - clip(p)).ln()).sum::<f64>() / m;
    let adversarial = -d_fake.data.iter().map(|&p| clip(p).ln()).sum::<f64>() / m;
    let reconstruction = (0..fake.n())
        .map(|i| {
            let d: Vec<f64> = fake.item(i).iter().zip(truth.item(i)).map(|(a, b)| a - b).collect();
            distance(&d, norm)
        })
        .sum::<f64>()
        / fake.n() as f64;
    Ok(GanLosses {
        discriminator: real_term + fake_term,
        adversarial,
        reconstruction,
        generator: adversarial + lambda * reconstruction,
    })
}

/// `∂(−mean log p)/∂p` or, with `real = false`, `∂(−mean log(1 − p))/∂p`.
fn log_grad(p: &Tensor, real: bool) -> Tensor {
    let m = p.data.len() as f64;
    p.map(|v| {
        if !(LOG_EPS..=1.0 - LOG_EPS).contains(&v) {
            0.0
        } else if real {
            -1.0 / (v * m)
        } else {
            1.0 / ((1.0 - v) * m)
        }
    })
}

/// Gradient of `λ · mean over images of distance(fake − truth)`.
fn reconstruction_grad(fake: &Tensor, truth: &Tensor, lambda: f64, norm: ReconstructionNorm) -> Tensor {
    let n = fake.n() as f64;
    let mut g = Tensor::zeros(fake.shape);
    for i in 0..fake.n() {
        let d: Vec<f64> = fake.item(i).iter().zip(truth.item(i)).map(|(a, b)| a - b).collect();
        let gi = g.item_mut(i);
        match norm {
            ReconstructionNorm::L2 => {
                let len = distance(&d, norm);
                if len > 0.0 {
                    for (o, v) in gi.iter_mut().zip(&d) {
                        *o = lambda * v / (len * n);
                    }
                }
            }
            ReconstructionNorm::L1 => {
                for (o, v) in gi.iter_mut().zip(&d) {
                    *o = lambda
                        * if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                        / n;
                }
            }
        }
    }
    g
}

/// A training or evaluation pair: a reconstructor output and the phantom it
/// was measured from. Images are rendered on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct GanPair {
    pub condition: TriVector,
    pub truth: Phantom,
}

impl GanPair {
    pub fn condition_image(&self, mesh: &TriMesh) -> FieldImage {
        render_smoothed(&self.condition, mesh)
    }

    pub fn truth_image(&self) -> Result<FieldImage> {
        rasterize_phantom_to_image(&self.truth)
    }
}

fn image_batch(images: &[FieldImage]) -> Tensor {
    Tensor::stack(
        images.iter().map(|im| im.pixels().to_vec()).collect(),
        [1, IMAGE_SIZE, IMAGE_SIZE],
    )
}

fn render_pairs(pairs: &[&GanPair], mesh: &TriMesh) -> Result<(Tensor, Tensor)> {
    let rendered = parallel::map_slice(pairs, |p| -> Result<(FieldImage, FieldImage)> {
        Ok((p.condition_image(mesh), p.truth_image()?))
    });
    let mut conds = Vec::with_capacity(pairs.len());
    let mut truths = Vec::with_capacity(pairs.len());
    for r in rendered {
        let (c, t) = r?;
        conds.push(c);
        truths.push(t);
    }
    Ok((image_batch(&conds), image_batch(&truths)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanEpochRecord {
    pub epoch: usize,
    pub discriminator_loss: f64,
    pub generator_loss: f64,
    pub reconstruction: f64,
    /// Fraction of patches classified correctly, real and fake pooled.
    pub discriminator_accuracy: f64,
    /// Mean IoU (percent) of enhanced validation conditions; NaN without
    /// validation pairs.
    pub val_iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    pub epochs: Vec<GanEpochRecord>,
    pub best_epoch: usize,
}

impl GanHistory {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("epoch,discriminator_loss,generator_loss,reconstruction,discriminator_accuracy,val_iou\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.discriminator_loss, e.generator_loss, e.reconstruction, e.discriminator_accuracy, e.val_iou
            ));
        }
        s
    }
}

/// Trained generator with its configuration.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub cfg: GanConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl GanModel {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            generator: build_generator(cfg)?,
            discriminator: build_discriminator(cfg)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Checkpoint::new("gan", &self.cfg)?;
        c.push_module("generator", &self.generator);
        c.push_module("discriminator", &self.discriminator);
        c.save(path)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("gan")?;
        let mut m = Self::new(&c.config()?)?;
        c.load_module("generator", &mut m.generator)?;
        c.load_module("discriminator", &mut m.discriminator)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Enhanced images of a batch of conditions.
    pub fn enhance_batch(&self, conditions: &[FieldImage]) -> Vec<FieldImage> {
        let mut g = self.generator.clone();
        let mut out = Vec::with_capacity(conditions.len());
        for chunk in conditions.chunks(self.cfg.batch_size.max(1)) {
            let y = g.forward(&image_batch(chunk), false);
            for i in 0..y.n() {
                let img = FieldImage::from_pixels(y.item(i).to_vec()).expect("256×256 output");
                out.push(img.masked_to_disk());
            }
        }
        out
    }
}

/// Generator forward pass on one condition image; pixels outside the
/// sensing field are zeroed.
pub fn enhance(model: &GanModel, condition: &FieldImage) -> FieldImage {
    model
        .enhance_batch(std::slice::from_ref(condition))
        .pop()
        .expect("one output")
}

fn mean_iou(model: &GanModel, conds: &Tensor, truths: &[Mask], threshold: f64) -> f64 {
    let images: Vec<FieldImage> = (0..conds.n())
        .map(|i| FieldImage::from_pixels(conds.item(i).to_vec()).expect("256×256"))
        .collect();
    let out = model.enhance_batch(&images);
    let scores = parallel::map_range(out.len(), |i| score_image(&out[i], &truths[i], threshold).iou);
    scores.iter().sum::<f64>() / scores.len().max(1) as f64
}

/// Alternating optimization: per batch one discriminator step on real and
/// generated pairs, then one generator step on the adversarial and
/// reconstruction terms. With validation pairs the generator of the epoch
/// with the best enhanced IoU is returned.
pub fn train_gan(
    train: &[GanPair],
    val: &[GanPair],
    mesh: &TriMesh,
    cfg: &GanConfig,
) -> Result<(GanModel, GanHistory)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("GAN training needs at least one pair".into()));
    }
    let mut model = GanModel::new(cfg)?;
    let mut opt_g = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut opt_d = opt_g.clone();

    let val_refs: Vec<&GanPair> = val.iter().take(cfg.validation_pairs).collect();
    let (val_conds, val_truth_imgs) = render_pairs(&val_refs, mesh)?;
    let val_truths: Vec<Mask> = (0..val_truth_imgs.n())
        .map(|i| {
            let img = FieldImage::from_pixels(val_truth_imgs.item(i).to_vec()).expect("256×256");
            Mask::from_image(&img, 0.5)
        })
        .collect();
    drop(val_truth_imgs);

    let mut history = GanHistory::default();
    let mut best: Option<(f64, crate::nn::Snapshot)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "gan-shuffle", epoch as u64));
        let take = cfg.pairs_per_epoch.unwrap_or(train.len()).min(train.len());
        let (mut d_sum, mut g_sum, mut r_sum, mut correct, mut scored, mut seen) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order[..take].chunks(cfg.batch_size) {
            let pairs: Vec<&GanPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (cond, truth) = render_pairs(&pairs, mesh)?;
            let fake = model.generator.forward(&cond, true);

            // discriminator step
            let d_real = model
                .discriminator
                .forward(&Tensor::concat_channels(&cond, &truth), true);
            model.discriminator.backward(&log_grad(&d_real, true));
            let d_fake = model
                .discriminator
                .forward(&Tensor::concat_channels(&cond, &fake), true);
            model.discriminator.backward(&log_grad(&d_fake, false));
            let losses = gan_losses(&d_real, &d_fake, &fake, &truth, cfg.lambda, cfg.reconstruction)?;
            if !(losses.discriminator.is_finite() && losses.generator.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!(
                        "GAN losses D {} G {} (reconstruction {})",
                        losses.discriminator, losses.generator, losses.reconstruction
                    ),
                });
            }
            opt_d.step(&mut model.discriminator.params_mut());
            correct += d_real.data.iter().filter(|&&p| p > 0.5).count() as f64;
            correct += d_fake.data.iter().filter(|&&p| p < 0.5).count() as f64;
            scored += d_real.data.len() + d_fake.data.len();

            // generator step through the updated discriminator
            let d_gen = model
                .discriminator
                .forward(&Tensor::concat_channels(&cond, &fake), true);
            let g_pair = model.discriminator.backward(&log_grad(&d_gen, true));
            zero_grads(&mut model.discriminator.params_mut());
            let (_, mut g_fake) = g_pair.split_channels(1);
            g_fake.add_assign(&reconstruction_grad(&fake, &truth, cfg.lambda, cfg.reconstruction));
            model.generator.backward(&g_fake);
            opt_g.step(&mut model.generator.params_mut());

            let n = chunk.len() as f64;
            d_sum += losses.discriminator * n;
            g_sum += losses.generator * n;
            r_sum += losses.reconstruction * n;
            seen += chunk.len();
        }
        let val_iou = if val_refs.is_empty() {
            f64::NAN
        } else {
            mean_iou(&model, &val_conds, &val_truths, cfg.threshold)
        };
        let rec = GanEpochRecord {
            epoch,
            discriminator_loss: d_sum / seen as f64,
            generator_loss: g_sum / seen as f64,
            reconstruction: r_sum / seen as f64,
            discriminator_accuracy: correct / scored as f64,
            val_iou,
        };
        log::info!(
            "gan epoch {epoch}: D {:.4}, G {:.4}, reconstruction {:.3}, D accuracy {:.3}, val IoU {:.2}",
            rec.discriminator_loss,
            rec.generator_loss,
            rec.reconstruction,
            rec.discriminator_accuracy,
            rec.val_iou
        );
        history.epochs.push(rec);
        if !val_refs.is_empty() && best.as_ref().map_or(true, |(b, _)| val_iou > *b) {
            best = Some((val_iou, snapshot(&model.generator)));
            history.best_epoch = epoch;
        }
    }
    match best {
        Some((_, s)) => restore(&mut model.generator, &s),
        None => history.best_epoch = cfg.epochs,
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_module_sampled;
    use rand::{Rng, SeedableRng};

    fn tiny() -> GanConfig {
        GanConfig {
            generator_widths: [2, 2, 3, 3, 4],
            discriminator_widths: [2, 3, 3, 4],
            ..GanConfig::default()
        }
    }

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn generator_shapes_and_determinism() {
        let cfg = GanConfig {
            generator_widths: [4, 8, 16, 32, 64],
            ..tiny()
        };
        let x = random([1, 1, 256, 256], 1);
        let mut g = build_generator(&cfg).unwrap();
        let y = g.forward(&x, false);
        assert_eq!(y.shape, [1, 1, 256, 256]);
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(build_generator(&cfg).unwrap().forward(&x, false), y);
    }

    #[test]
    fn generator_bottleneck_is_eight() {
        let mut g = build_generator(&tiny()).unwrap();
        let mut h = random([1, 1, 256, 256], 2);
        for s in 0..5 {
            h = g.enc[2 * s].forward(&h, false);
            h = g.enc[2 * s + 1].forward(&h, false);
            h = g.pools[s].forward(&h, false);
        }
        assert_eq!((h.h(), h.w()), (8, 8));
    }

    #[test]
    fn discriminator_patch_map() {
        let mut d = build_discriminator(&tiny()).unwrap();
        let cond = random([1, 1, 256, 256], 3);
        let cand = random([1, 1, 256, 256], 4);
        let y = d.forward(&Tensor::concat_channels(&cond, &cand), false);
        assert_eq!(y.shape, [1, 1, 16, 16]);
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
        let swapped = d.forward(&Tensor::concat_channels(&cand, &cond), false);
        assert_ne!(swapped, y);
    }

    #[test]
    fn generator_gradient() {
        let mut g = build_generator(&tiny()).unwrap();
        let x = random([2, 1, 32, 32], 5);
        let rep = check_module_sampled(&mut g, &x, 1e-6, 6, 12);
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn discriminator_gradient() {
        let mut d = build_discriminator(&tiny()).unwrap();
        let x = random([2, 2, 32, 32], 7);
        let rep = check_module_sampled(&mut d, &x, 1e-6, 8, 12);
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn loss_values() {
        let half = Tensor::from_vec([2, 1, 2, 2], vec![0.5; 8]).unwrap();
        let img = random([2, 1, 4, 4], 9);
        let l = gan_losses(&half, &half, &img, &img, 100.0, ReconstructionNorm::L2).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((l.adversarial - ln2).abs() < 1e-12);
        assert!((l.discriminator - 2.0 * ln2).abs() < 1e-12);
        assert_eq!(l.reconstruction, 0.0);

        let other = random([2, 1, 4, 4], 10);
        let a = gan_losses(&half, &half, &img, &other, 1.0, ReconstructionNorm::L2).unwrap();
        let b = gan_losses(&half, &half, &img, &other, 2.0, ReconstructionNorm::L2).unwrap();
        assert!(((b.generator - b.adversarial) - 2.0 * (a.generator - a.adversarial)).abs() < 1e-12);

        let oracle: f64 = (0..2)
            .map(|i| {
                img.item(i)
                    .iter()
                    .zip(other.item(i))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 2.0;
        assert!((a.reconstruction - oracle).abs() < 1e-12);
        assert!(gan_losses(
            &half,
            &half,
            &img,
            &random([1, 1, 4, 4], 1),
            1.0,
            ReconstructionNorm::L1
        )
        .is_err());
    }

    #[test]
    fn loss_gradients_match_differences() {
        let fake = random([2, 1, 3, 3], 11);
        let truth = random([2, 1, 3, 3], 12);
        for norm in [ReconstructionNorm::L2, ReconstructionNorm::L1] {
            let g = reconstruction_grad(&fake, &truth, 3.0, norm);
            let f = |v: &[f64]| {
                let t = Tensor::from_vec(fake.shape, v.to_vec()).unwrap();
                let p = Tensor::from_vec([2, 1, 1, 1], vec![0.5; 2]).unwrap();
                3.0 * gan_losses(&p, &p, &t, &truth, 1.0, norm).unwrap().reconstruction
            };
            let rep = crate::nn::gradcheck::grad_check(f, &fake.data, &g.data, 1e-6);
            assert!(rep.max_rel_error < 1e-5, "{norm:?} {rep:?}");
        }
        let p = Tensor::from_vec([1, 1, 2, 2], vec![0.2, 0.4, 0.6, 0.9]).unwrap();
        for real in [true, false] {
            let g = log_grad(&p, real);
            let f = |v: &[f64]| {
                let m = v.len() as f64;
                -v.iter()
                    .map(|&x| if real { x.ln() } else { (1.0 - x).ln() })
                    .sum::<f64>()
                    / m
            };
            let rep = crate::nn::gradcheck::grad_check(f, &p.data, &g.data, 1e-7);
            assert!(rep.max_rel_error < 1e-5, "{rep:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = GanModel::new(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gan.ckpt");
        m.save(&p).unwrap();
        let back = GanModel::load(&p).unwrap();
        assert_eq!(snapshot(&back.generator), snapshot(&m.generator));
        assert_eq!(snapshot(&back.discriminator), snapshot(&m.discriminator));
        assert_eq!(back.cfg, m.cfg);
    }
}
