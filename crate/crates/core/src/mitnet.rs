//! The complex U-net classifier: a 16×16 complex differential frame in, a
//! 512-long triangle occupancy vector out.
//!
//! Encoder stages are two complex 3×3 convolutions with modReLU followed by
//! modulus max pooling; the decoder up-samples, joins the encoder features
//! of the same scale along the complex channel axis and applies the same
//! two-convolution block. The head converts to real channels, flattens and
//! applies a dense layer with a sigmoid.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::complex_nn::{cconcat, csplit, CConv2d, CMaxPool, ModRelu, Upsample2x};
use crate::dataset::{frame_planes, Sample};
use crate::error::{Error, Result};
use crate::forward_sim::ComplexFrame;
use crate::geometry::{build_mesh, rasterize_phantom_to_image, TriVector, TRIANGLE_COUNT};
use crate::metrics::{score_tri, Mask};
use crate::nn::{restore, snapshot, Adam, AdamConfig, ConvGeometry, Linear, Module, Param, Sigmoid, Tensor};
use crate::rng;

/// Per-element BCE weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelWeights {
    /// `w_i = n / (2·count of the class of t_i)` within each batch.
    InverseFrequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitnetConfig {
    /// Complex channel width of each scale, finest first. The number of
    /// pooling steps is `widths.len() - 1`.
    pub widths: Vec<usize>,
    pub threshold: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a better validation IoU.
    pub patience: Option<usize>,
    pub label_weights: LabelWeights,
    /// Frames are divided by this before entering the network; set from
    /// the training data when `None`.
    pub input_scale: Option<f64>,
    pub seed: u64,
}

impl Default for MitnetConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            threshold: 0.5,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 16,
            patience: Some(20),
            label_weights: LabelWeights::InverseFrequency,
            input_scale: None,
            seed: 42,
        }
    }
}

impl MitnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.len() > 5 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths must list 2 to 5 nonzero stages for a 16×16 input, got {:?}",
                self.widths
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        if let Some(s) = self.input_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("input_scale must be positive, got {s}")));
            }
        }
        Ok(())
    }

    fn depth(&self) -> usize {
        self.widths.len() - 1
    }
}

const CONV3: ConvGeometry = ConvGeometry::new(3, 1, 1);

/// Two complex 3×3 convolutions, each followed by modReLU.
#[derive(Debug, Clone)]
struct CBlock {
    c1: CConv2d,
    a1: ModRelu,
    c2: CConv2d,
    a2: ModRelu,
}

impl CBlock {
    fn new(cin: usize, cout: usize, r: &mut rng::Rng) -> Self {
        Self {
            c1: CConv2d::new(cin, cout, CONV3, r),
            a1: ModRelu::new(cout),
            c2: CConv2d::new(cout, cout, CONV3, r),
            a2: ModRelu::new(cout),
        }
    }

    fn param_count(cin: usize, cout: usize) -> usize {
        let conv = |i: usize, o: usize| 2 * o * i * 9 + 2 * o;
        conv(cin, cout) + cout + conv(cout, cout) + cout
    }
}

impl Module for CBlock {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let h = self.c1.forward(x, train);
        let h = self.a1.forward(&h, train);
        let h = self.c2.forward(&h, train);
        self.a2.forward(&h, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.a2.backward(g);
        let g = self.c2.backward(&g);
        let g = self.a1.backward(&g);
        self.c1.backward(&g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.c1.params_mut();
        v.extend(self.a1.params_mut());
        v.extend(self.c2.params_mut());
        v.extend(self.a2.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.c1.params();
        v.extend(self.a1.params());
        v.extend(self.c2.params());
        v.extend(self.a2.params());
        v
    }
}

/// The complex CNN. Implements [`Module`] on packed `[n, 2, 16, 16]`
/// inputs (real plane, imaginary plane) with `[n, 512, 1, 1]` outputs.
#[derive(Debug, Clone)]
pub struct CcnnModel {
    pub cfg: MitnetConfig,
    enc: Vec<CBlock>,
    pools: Vec<CMaxPool>,
    bottleneck: CBlock,
    ups: Vec<Upsample2x>,
    /// Indexed by scale, finest first.
    dec: Vec<CBlock>,
    head: Linear,
    out: Sigmoid,
    dec_shape: [usize; 4],
}

pub fn build_mitnet(cfg: &MitnetConfig) -> Result<CcnnModel> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "ccnn-init", 0);
    let w = &cfg.widths;
    let d = cfg.depth();
    let mut enc = Vec::new();
    let mut cin = 1;
    for &wi in &w[..d] {
        enc.push(CBlock::new(cin, wi, &mut r));
        cin = wi;
    }
    let bottleneck = CBlock::new(w[d - 1], w[d], &mut r);
    let dec = (0..d).map(|j| CBlock::new(w[j + 1] + w[j], w[j], &mut r)).collect();
    let head = Linear::new(2 * w[0] * 256, TRIANGLE_COUNT, &mut r);
    Ok(CcnnModel {
        cfg: cfg.clone(),
        enc,
        pools: (0..d).map(|_| CMaxPool::new(2)).collect(),
        bottleneck,
        ups: (0..d).map(|_| Upsample2x::new()).collect(),
        dec,
        head,
        out: Sigmoid::default(),
        dec_shape: [0; 4],
    })
}

/// Closed-form trainable parameter count of [`build_mitnet`].
pub fn expected_param_count(widths: &[usize]) -> usize {
    let d = widths.len() - 1;
    let mut n = 0;
    let mut cin = 1;
    for &w in &widths[..d] {
        n += CBlock::param_count(cin, w);
        cin = w;
    }
    n += CBlock::param_count(widths[d - 1], widths[d]);
    for j in 0..d {
        n += CBlock::param_count(widths[j + 1] + widths[j], widths[j]);
    }
    n + 2 * widths[0] * 256 * TRIANGLE_COUNT + TRIANGLE_COUNT
}

impl Module for CcnnModel {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(&x.shape[1..], &[2, 16, 16], "input must be [n, 2, 16, 16]");
        let d = self.cfg.depth();
        let mut skips = Vec::with_capacity(d);
        let mut h = x.clone();
        for i in 0..d {
            h = self.enc[i].forward(&h, train);
            skips.push(h.clone());
            h = self.pools[i].forward(&h, train);
        }
        h = self.bottleneck.forward(&h, train);
        for j in (0..d).rev() {
            h = self.ups[j].forward(&h, train);
            h = cconcat(&h, &skips[j]);
            h = self.dec[j].forward(&h, train);
        }
        self.dec_shape = h.shape;
        let y = self.head.forward(&h.flatten(), train);
        self.out.forward(&y, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let d = self.cfg.depth();
        let g = self.out.backward(g);
        let mut g = self.head.backward(&g).reshape(self.dec_shape);
        let mut skip_grads = vec![None; d];
        for j in 0..d {
            g = self.dec[j].backward(&g);
            let (g_up, g_skip) = csplit(&g, self.cfg.widths[j + 1]);
            skip_grads[j] = Some(g_skip);
            g = self.ups[j].backward(&g_up);
        }
        g = self.bottleneck.backward(&g);
        for i in (0..d).rev() {
            g = self.pools[i].backward(&g);
            g.add_assign(skip_grads[i].as_ref().expect("skip gradient"));
            g = self.enc[i].backward(&g);
        }
        g
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for b in &mut self.enc {
            v.extend(b.params_mut());
        }
        v.extend(self.bottleneck.params_mut());
        for b in &mut self.dec {
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for b in &self.enc {
            v.extend(b.params());
        }
        v.extend(self.bottleneck.params());
        for b in &self.dec {
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }
}

impl CcnnModel {
    fn scale(&self) -> f64 {
        self.cfg.input_scale.unwrap_or(1.0)
    }

    /// Packs frames into a network batch.
    pub fn batch(&self, frames: &[&ComplexFrame]) -> Tensor {
        let s = self.scale();
        let items = frames
            .iter()
            .map(|f| frame_planes(f).into_iter().map(|v| v / s).collect())
            .collect();
        Tensor::stack(items, [2, 16, 16])
    }

    pub fn infer_batch(&self, frames: &[&ComplexFrame]) -> Vec<TriVector> {
        let mut m = self.clone();
        let y = m.forward(&self.batch(frames), false);
        (0..y.n())
            .map(|i| TriVector::new(y.item(i).to_vec()).expect("512 outputs"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Checkpoint::new("ccnn", &self.cfg)?;
        c.push_module("ccnn", self);
        c.save(path)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("ccnn")?;
        let mut m = build_mitnet(&c.config()?)?;
        c.load_module("ccnn", &mut m)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Forward pass on one frame.
pub fn infer(model: &CcnnModel, frame: &ComplexFrame) -> TriVector {
    model.infer_batch(&[frame]).pop().expect("one output")
}

pub fn binarize(v: &TriVector, threshold: f64) -> TriVector {
    TriVector::new(
        v.as_slice()
            .iter()
            .map(|&x| f64::from(u8::from(x >= threshold)))
            .collect(),
    )
    .expect("length preserved")
}

pub const BCE_EPS: f64 = 1e-7;

/// Weighted binary cross-entropy `−(1/n)·Σ wᵢ[tᵢ ln oᵢ + (1−tᵢ) ln(1−oᵢ)]`
/// with outputs clipped to `[ε, 1−ε]`.
pub fn bce_loss(o: &[f64], t: &[f64], w: &[f64]) -> Result<f64> {
    if o.len() != t.len() || o.len() != w.len() {
        return Err(Error::shape(
            o.len(),
            format!("{} targets / {} weights", t.len(), w.len()),
        ));
    }
    let n = o.len() as f64;
    let s: f64 = o
        .iter()
        .zip(t)
        .zip(w)
        .map(|((&o, &t), &w)| {
            let o = o.clamp(BCE_EPS, 1.0 - BCE_EPS);
            w * (t * o.ln() + (1.0 - t) * (1.0 - o).ln())
        })
        .sum();
    Ok(-s / n)
}

/// Derivative of [`bce_loss`] with respect to the outputs; zero where the
/// clip is active.
pub fn bce_grad(o: &[f64], t: &[f64], w: &[f64]) -> Vec<f64> {
    let n = o.len() as f64;
    o.iter()
        .zip(t)
        .zip(w)
        .map(|((&o, &t), &w)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&o) {
                0.0
            } else {
                -w * (t / o - (1.0 - t) / (1.0 - o)) / n
            }
        })
        .collect()
}

pub fn label_weights(t: &[f64], mode: LabelWeights) -> Vec<f64> {
    match mode {
        LabelWeights::Uniform => vec![1.0; t.len()],
        LabelWeights::InverseFrequency => {
            let n = t.len() as f64;
            let pos = t.iter().filter(|&&v| v >= 0.5).count() as f64;
            let neg = n - pos;
            t.iter()
                .map(|&v| {
                    let count = if v >= 0.5 { pos } else { neg };
                    n / (2.0 * count)
                })
                .collect()
        }
    }
}

/// Root mean square of all frame entries.
pub fn frame_rms(frames: &[&ComplexFrame]) -> f64 {
    let (mut s, mut k) = (0.0, 0usize);
    for f in frames {
        for z in f.as_slice() {
            s += z.norm_sqr();
            k += 2;
        }
    }
    if s > 0.0 {
        (s / k as f64).sqrt()
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean IoU (percent) of the rendered validation reconstructions.
    pub val_iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_iou\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.val_iou));
        }
        s
    }
}

/// Validation labels and truth masks prepared once.
pub(crate) struct EvalSet<'a> {
    pub labels: Vec<&'a TriVector>,
    pub truths: Vec<Mask>,
}

impl<'a> EvalSet<'a> {
    pub fn new(samples: &[&'a Sample]) -> Result<Self> {
        let truths = crate::parallel::map_slice(samples, |s| {
            rasterize_phantom_to_image(&s.phantom).map(|img| Mask::from_image(&img, 0.5))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels: samples.iter().map(|s| &s.label).collect(),
            truths,
        })
    }
}

fn batch_loss_grad(out: &Tensor, labels: &[&TriVector], mode: LabelWeights) -> (f64, Tensor) {
    let t: Vec<f64> = labels.iter().flat_map(|l| l.as_slice().iter().copied()).collect();
    let w = label_weights(&t, mode);
    let loss = bce_loss(&out.data, &t, &w).expect("matching lengths");
    let g = bce_grad(&out.data, &t, &w);
    (loss, Tensor::from_vec(out.shape, g).expect("same shape"))
}

/// Optimisation settings shared by every supervised reconstructor.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FitSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
    pub label_weights: LabelWeights,
    pub threshold: f64,
    pub seed: u64,
    pub name: &'static str,
}

/// Mini-batch Adam on the weighted BCE with validation IoU model selection.
/// `batch` packs samples into network input; the best snapshot is restored
/// into `model` on return.
pub(crate) fn fit<M: Module>(
    model: &mut M,
    batch: impl Fn(&M, &[&Sample]) -> Tensor,
    train: &[&Sample],
    val: &[&Sample],
    s: &FitSettings,
) -> Result<History> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs nonempty train and validation splits".into(),
        ));
    }
    let mesh = build_mesh();
    let val_set = EvalSet::new(val)?;
    let mut opt = Adam::new(AdamConfig {
        learning_rate: s.learning_rate,
        ..AdamConfig::default()
    });
    let mut history = History::default();
    let mut best = (f64::NEG_INFINITY, snapshot(model));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=s.epochs {
        order.shuffle(&mut rng::stream(s.seed, &format!("{}-shuffle", s.name), epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(s.batch_size) {
            let items: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<&TriVector> = items.iter().map(|x| &x.label).collect();
            let x = batch(model, &items);
            let out = model.forward(&x, true);
            let (loss, g) = batch_loss_grad(&out, &labels, s.label_weights);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("{} training loss {loss}", s.name),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            model.backward(&g);
            opt.step(&mut model.params_mut());
        }
        let train_loss = loss_sum / train.len() as f64;

        let x = batch(model, val);
        let out = model.forward(&x, false);
        let (val_loss, _) = batch_loss_grad(&out, &val_set.labels, s.label_weights);
        let preds: Vec<TriVector> = (0..out.n())
            .map(|i| TriVector::new(out.item(i).to_vec()).expect("512 outputs"))
            .collect();
        let scores = crate::parallel::map_range(preds.len(), |i| {
            score_tri(&preds[i], &mesh, &val_set.truths[i], s.threshold).iou
        });
        let val_iou = scores.iter().sum::<f64>() / scores.len() as f64;
        log::info!(
            "{} epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}, val IoU {val_iou:.2}",
            s.name
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_iou,
        });
        if val_iou > best.0 {
            best = (val_iou, snapshot(model));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if s.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    restore(model, &best.1);
    Ok(history)
}

/// Trains the complex CNN; returns the model with the best validation IoU
/// and the per-epoch history.
pub fn train_ccnn(train: &[&Sample], val: &[&Sample], cfg: &MitnetConfig) -> Result<(CcnnModel, History)> {
    let mut cfg = cfg.clone();
    if cfg.input_scale.is_none() && !train.is_empty() {
        let frames: Vec<&ComplexFrame> = train.iter().map(|s| &s.frame).collect();
        cfg.input_scale = Some(frame_rms(&frames));
    }
    let mut model = build_mitnet(&cfg)?;
    let settings = FitSettings {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        patience: cfg.patience,
        label_weights: cfg.label_weights,
        threshold: cfg.threshold,
        seed: cfg.seed,
        name: "ccnn",
    };
    let history = fit(
        &mut model,
        |m, items| m.batch(&items.iter().map(|s| &s.frame).collect::<Vec<_>>()),
        train,
        val,
        &settings,
    )?;
    Ok((model, history))
}
