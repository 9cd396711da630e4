//! Comparison reconstructors: damped Gauss-Newton inversion of the FEM
//! model, a fully connected network and a stacked autoencoder. The two
//! learned baselines see only the modulus of the measurement frame.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::forward_sim::{ComplexFrame, FemModel, MaterialMap, DEFAULT_BACKGROUND_SIGMA, DEFAULT_FREQUENCY_HZ, MU_0};
use crate::geometry::{TriVector, TRIANGLE_COUNT};
use crate::mitnet::{fit, FitSettings, History, LabelWeights};
use crate::nn::gemm::{matmul, matmul_tn};
use crate::nn::{Adam, AdamConfig, BatchNorm, Linear, Module, Param, Relu, Sigmoid, Tensor};
use crate::{parallel, rng};

/// Number of off-diagonal channels of a frame.
pub const CHANNELS: usize = 240;

/// Row-major modulus of every frame entry.
pub fn magnitude_input(frame: &ComplexFrame) -> Vec<f64> {
    frame.as_slice().iter().map(|z| z.norm()).collect()
}

/// Off-diagonal entries stacked as `[re₀ … re₂₃₉, im₀ … im₂₃₉]`.
pub fn measurement_vector(frame: &ComplexFrame) -> Vec<f64> {
    let off: Vec<_> = frame.off_diagonal().collect();
    let mut v: Vec<f64> = off.iter().map(|z| z.re).collect();
    v.extend(off.iter().map(|z| z.im));
    v
}

// ---------------------------------------------------------------------------
// Gauss-Newton

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NrConfig {
    pub max_iterations: usize,
    /// Tikhonov damping; `None` uses `alpha_scale · trace(JᵀJ) / 512`.
    pub alpha: Option<f64>,
    pub alpha_scale: f64,
    /// Factor applied to the damping after a rejected step.
    pub alpha_growth: f64,
    /// Consecutive rejected steps that end the iteration.
    pub max_rejections: usize,
    pub background_sigma: f64,
    pub frequency_hz: f64,
    /// Recompute the Jacobian at every accepted iterate instead of keeping
    /// the one linearized at the background.
    pub refresh_jacobian: bool,
}

impl Default for NrConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            alpha: None,
            alpha_scale: 1e-3,
            alpha_growth: 10.0,
            max_rejections: 3,
            background_sigma: DEFAULT_BACKGROUND_SIGMA,
            frequency_hz: DEFAULT_FREQUENCY_HZ,
            refresh_jacobian: false,
        }
    }
}

impl NrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("alpha must be positive, got {a}")));
            }
        }
        if !(self.alpha_scale > 0.0) || !(self.alpha_growth > 1.0) {
            return Err(Error::Config(
                "alpha_scale must be positive and alpha_growth above 1".into(),
            ));
        }
        if !(self.background_sigma > 0.0) || !(self.frequency_hz > 0.0) {
            return Err(Error::Config(
                "background conductivity and frequency must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn background(&self) -> MaterialMap {
        MaterialMap {
            sigma: vec![self.background_sigma; TRIANGLE_COUNT],
            mu: MU_0,
            omega: 2.0 * PI * self.frequency_hz,
        }
    }
}

/// Sensitivity matrix, `480 × 512` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub data: Vec<f64>,
}

impl Jacobian {
    pub const ROWS: usize = 2 * CHANNELS;
    pub const COLS: usize = TRIANGLE_COUNT;

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * Self::COLS + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..Self::ROWS).map(|r| self.get(r, col)).collect()
    }

    /// `J·x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; Self::ROWS];
        matmul(Self::ROWS, Self::COLS, 1, &self.data, x, &mut y, false);
        y
    }

    /// `Jᵀ·r`.
    pub fn apply_t(&self, r: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; Self::COLS];
        matmul_tn(Self::COLS, Self::ROWS, 1, &self.data, r, &mut y, false);
        y
    }

    /// `JᵀJ`, `512 × 512`.
    pub fn gram(&self) -> Vec<f64> {
        let n = Self::COLS;
        let mut g = vec![0.0; n * n];
        matmul_tn(n, Self::ROWS, n, &self.data, &self.data, &mut g, false);
        g
    }
}

/// Forward-difference sensitivities around `mat`: column `j` is the
/// response to raising `σⱼ` by `δ = 1e-3 ·` `background_sigma`, divided by `δ`.
pub fn nr_jacobian(model: &FemModel, mat: &MaterialMap, background_sigma: f64) -> Result<Jacobian> {
    let delta = 1e-3 * background_sigma;
    let base = measurement_vector(&model.forward(mat)?);
    let cols = parallel::map_range(TRIANGLE_COUNT, |j| -> Result<Vec<f64>> {
        let mut m = mat.clone();
        m.sigma[j] += delta;
        let v = measurement_vector(&model.forward(&m)?);
        Ok(v.iter().zip(&base).map(|(a, b)| (a - b) / delta).collect())
    });
    let mut data = vec![0.0; Jacobian::ROWS * Jacobian::COLS];
    for (j, col) in cols.into_iter().enumerate() {
        for (r, v) in col?.into_iter().enumerate() {
            data[r * Jacobian::COLS + j] = v;
        }
    }
    Ok(Jacobian { data })
}

/// Outcome of one Gauss-Newton reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct NrResult {
    /// Absolute conductivity of the best iterate.
    pub sigma: TriVector,
    /// `max(σ − σ_bg, 0)` scaled to a unit maximum.
    pub image: TriVector,
    /// Residual norm of the start and of every accepted iterate.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// The iteration stopped after `max_rejections` consecutive rejected steps.
    pub diverged: bool,
}

/// Gauss-Newton solver with the background linearization cached.
#[derive(Debug, Clone)]
pub struct NrSolver {
    pub cfg: NrConfig,
    model: FemModel,
    background: MaterialMap,
    base: Vec<f64>,
    jacobian: Jacobian,
    gram: Vec<f64>,
    alpha: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn damped_factor(gram: &[f64], alpha: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = TRIANGLE_COUNT;
    let mut a = DMatrix::from_row_slice(n, n, gram);
    for i in 0..n {
        a[(i, i)] += alpha;
    }
    Cholesky::new(a).ok_or_else(|| Error::Solver { residual: f64::NAN })
}

impl NrSolver {
    pub fn new(cfg: &NrConfig) -> Result<Self> {
        Self::with_model(cfg, FemModel::new())
    }

    pub fn with_model(cfg: &NrConfig, model: FemModel) -> Result<Self> {
        cfg.validate()?;
        let background = cfg.background();
        let base = measurement_vector(&model.forward(&background)?);
        let jacobian = nr_jacobian(&model, &background, cfg.background_sigma)?;
        let gram = jacobian.gram();
        let trace: f64 = (0..TRIANGLE_COUNT).map(|i| gram[i * TRIANGLE_COUNT + i]).sum();
        let alpha = cfg.alpha.unwrap_or(cfg.alpha_scale * trace / TRIANGLE_COUNT as f64);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            background,
            base,
            jacobian,
            gram,
            alpha,
        })
    }

    pub fn jacobian(&self) -> &Jacobian {
        &self.jacobian
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Differential measurement predicted for `sigma`.
    fn predict(&self, sigma: &[f64]) -> Result<Vec<f64>> {
        let m = MaterialMap {
            sigma: sigma.to_vec(),
            ..self.background.clone()
        };
        let f = measurement_vector(&self.model.forward(&m)?);
        Ok(f.iter().zip(&self.base).map(|(a, b)| a - b).collect())
    }

    /// `σ ← σ + (JᵀJ + αI)⁻¹ Jᵀ (d − F(σ))` from the background, accepting a
    /// step only when it does not increase the residual norm.
    pub fn reconstruct(&self, frame: &ComplexFrame) -> Result<NrResult> {
        let d = measurement_vector(frame);
        let bg = self.cfg.background_sigma;
        let mut sigma = vec![bg; TRIANGLE_COUNT];
        let mut r: Vec<f64> = d.clone();
        let mut rn = norm(&r);
        let mut residuals = vec![rn];
        let mut alpha = self.alpha;
        let mut jac = None::<Jacobian>;
        let mut gram = None::<Vec<f64>>;
        let mut chol = damped_factor(&self.gram, alpha)?;
        let (mut rejections, mut iterations, mut diverged) = (0, 0, false);

        while iterations < self.cfg.max_iterations && rn > 0.0 {
            iterations += 1;
            let j = jac.as_ref().unwrap_or(&self.jacobian);
            let step = chol.solve(&DVector::from_vec(j.apply_t(&r)));
            let trial: Vec<f64> = sigma.iter().zip(step.iter()).map(|(s, d)| (s + d).max(0.0)).collect();
            let tr: Vec<f64> = d.iter().zip(self.predict(&trial)?).map(|(a, b)| a - b).collect();
            let tn = norm(&tr);
            if tn <= rn {
                sigma = trial;
                r = tr;
                rn = tn;
                residuals.push(rn);
                rejections = 0;
                if self.cfg.refresh_jacobian && iterations < self.cfg.max_iterations {
                    let m = MaterialMap {
                        sigma: sigma.clone(),
                        ..self.background.clone()
                    };
                    let nj = nr_jacobian(&self.model, &m, bg)?;
                    let g = nj.gram();
                    chol = damped_factor(&g, alpha)?;
                    jac = Some(nj);
                    gram = Some(g);
                }
            } else {
                rejections += 1;
                if rejections >= self.cfg.max_rejections {
                    diverged = true;
                    log::warn!("Gauss-Newton stopped after {rejections} rejected steps");
                    break;
                }
                alpha *= self.cfg.alpha_growth;
                chol = damped_factor(gram.as_deref().unwrap_or(&self.gram), alpha)?;
            }
        }

        let delta: Vec<f64> = sigma.iter().map(|s| (s - bg).max(0.0)).collect();
        let peak = delta.iter().cloned().fold(0.0, f64::max);
        let image = if peak > 0.0 {
            delta.iter().map(|v| v / peak).collect()
        } else {
            vec![0.0; TRIANGLE_COUNT]
        };
        Ok(NrResult {
            sigma: TriVector::new(sigma)?,
            image: TriVector::new(image)?,
            residuals,
            iterations,
            diverged,
        })
    }
}

/// One-shot reconstruction; builds the background Jacobian first.
pub fn nr_reconstruct(frame: &ComplexFrame, cfg: &NrConfig) -> Result<TriVector> {
    Ok(NrSolver::new(cfg)?.reconstruct(frame)?.image)
}

// ---------------------------------------------------------------------------
// Magnitude-input networks

/// Training settings of the fully connected and autoencoder baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
    pub label_weights: LabelWeights,
    pub threshold: f64,
    /// Magnitudes are divided by this; set from the training data when `None`.
    pub input_scale: Option<f64>,
    /// Epochs of unsupervised training per autoencoder (SAE only).
    pub pretrain_epochs: usize,
    pub seed: u64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 16,
            patience: Some(20),
            label_weights: LabelWeights::InverseFrequency,
            threshold: 0.5,
            input_scale: None,
            pretrain_epochs: 50,
            seed: 42,
        }
    }
}

impl DenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    fn settings(&self, name: &'static str) -> FitSettings {
        FitSettings {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            label_weights: self.label_weights,
            threshold: self.threshold,
            seed: self.seed,
            name,
        }
    }

    fn with_scale(&self, train: &[&Sample]) -> Self {
        let mut c = self.clone();
        if c.input_scale.is_none() {
            let (mut s, mut k) = (0.0, 0usize);
            for x in train {
                for v in magnitude_input(&x.frame) {
                    s += v * v;
                    k += 1;
                }
            }
            c.input_scale = Some(if s > 0.0 { (s / k as f64).sqrt() } else { 1.0 });
        }
        c
    }
}

/// `[n, 256, 1, 1]` batch of scaled magnitudes.
fn magnitude_batch(frames: &[&ComplexFrame], scale: f64) -> Tensor {
    let items = frames
        .iter()
        .map(|f| magnitude_input(f).into_iter().map(|v| v / scale).collect())
        .collect();
    Tensor::stack(items, [256, 1, 1])
}

fn outputs(y: &Tensor) -> Vec<TriVector> {
    (0..y.n())
        .map(|i| TriVector::new(y.item(i).to_vec()).expect("512 outputs"))
        .collect()
}

/// `256 → 360 → 360 → 512`, each hidden layer followed by batch
/// normalization and ReLU, sigmoid output.
#[derive(Debug, Clone)]
pub struct FcnModel {
    pub cfg: DenseConfig,
    l1: Linear,
    n1: BatchNorm,
    a1: Relu,
    l2: Linear,
    n2: BatchNorm,
    a2: Relu,
    l3: Linear,
    out: Sigmoid,
}

pub const FCN_HIDDEN: usize = 360;

pub fn build_fcn(cfg: &DenseConfig) -> Result<FcnModel> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "fcn-init", 0);
    Ok(FcnModel {
        cfg: cfg.clone(),
        l1: Linear::new(256, FCN_HIDDEN, &mut r),
        n1: BatchNorm::new(FCN_HIDDEN),
        a1: Relu::default(),
        l2: Linear::new(FCN_HIDDEN, FCN_HIDDEN, &mut r),
        n2: BatchNorm::new(FCN_HIDDEN),
        a2: Relu::default(),
        l3: Linear::new(FCN_HIDDEN, TRIANGLE_COUNT, &mut r),
        out: Sigmoid::default(),
    })
}

impl FcnModel {
    fn layers(&mut self) -> [&mut dyn Module; 8] {
        [
            &mut self.l1,
            &mut self.n1,
            &mut self.a1,
            &mut self.l2,
            &mut self.n2,
            &mut self.a2,
            &mut self.l3,
            &mut self.out,
        ]
    }

    pub fn batch(&self, frames: &[&ComplexFrame]) -> Tensor {
        magnitude_batch(frames, self.cfg.input_scale.unwrap_or(1.0))
    }

    pub fn infer_batch(&self, frames: &[&ComplexFrame]) -> Vec<TriVector> {
        let mut m = self.clone();
        outputs(&m.forward(&self.batch(frames), false))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Checkpoint::new("fcn", &self.cfg)?;
        c.push_module("fcn", self);
        c.save(path)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("fcn")?;
        let mut m = build_fcn(&c.config()?)?;
        c.load_module("fcn", &mut m)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for FcnModel {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.clone();
        for l in self.layers() {
            h = l.forward(&h, train);
        }
        h
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut g = g.clone();
        for l in self.layers().into_iter().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.extend(self.n1.params_mut());
        v.extend(self.l2.params_mut());
        v.extend(self.n2.params_mut());
        v.extend(self.l3.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.l1.params();
        v.extend(self.n1.params());
        v.extend(self.l2.params());
        v.extend(self.n2.params());
        v.extend(self.l3.params());
        v
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut v = self.n1.buffers();
        v.extend(self.n2.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.n1.buffers_mut();
        v.extend(self.n2.buffers_mut());
        v
    }
}

pub fn train_fcn(train: &[&Sample], val: &[&Sample], cfg: &DenseConfig) -> Result<(FcnModel, History)> {
    let cfg = cfg.with_scale(train);
    let mut model = build_fcn(&cfg)?;
    let history = fit(
        &mut model,
        |m, items| m.batch(&items.iter().map(|s| &s.frame).collect::<Vec<_>>()),
        train,
        val,
        &cfg.settings("fcn"),
    )?;
    Ok((model, history))
}

/// A single-hidden-layer autoencoder with sigmoid code and linear decoder.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Linear,
    code: Sigmoid,
    pub decoder: Linear,
}

impl Autoencoder {
    pub fn new(input: usize, hidden: usize, r: &mut rng::Rng) -> Self {
        Self {
            encoder: Linear::new(input, hidden, r),
            code: Sigmoid::default(),
            decoder: Linear::new(hidden, input, r),
        }
    }

    /// Hidden code `sigmoid(W x + b)`.
    pub fn encode(&self, x: &Tensor) -> Tensor {
        let mut e = self.encoder.clone();
        Sigmoid::default().forward(&e.forward(x, false), false)
    }
}

impl Module for Autoencoder {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let h = self.encoder.forward(x, train);
        let h = self.code.forward(&h, train);
        self.decoder.forward(&h, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.decoder.backward(g);
        let g = self.code.backward(&g);
        self.encoder.backward(&g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }
}

/// Mean squared reconstruction error over all entries.
pub fn mse(y: &Tensor, x: &Tensor) -> f64 {
    y.data.iter().zip(&x.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.data.len() as f64
}

/// Trains `ae` to reproduce the rows of `x`; returns the loss before
/// training followed by the mean loss of each epoch.
pub fn pretrain_autoencoder(ae: &mut Autoencoder, x: &Tensor, cfg: &DenseConfig, stream: &str) -> Result<Vec<f64>> {
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut curve = vec![mse(&ae.clone().forward(x, false), x)];
    let item = x.item_len();
    let mut order: Vec<usize> = (0..x.n()).collect();
    for epoch in 1..=cfg.pretrain_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, stream, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = Tensor::stack(chunk.iter().map(|&i| x.item(i).to_vec()).collect(), [item, 1, 1]);
            let y = ae.forward(&xb, true);
            let loss = mse(&y, &xb);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("{stream} reconstruction loss {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            let scale = 2.0 / xb.data.len() as f64;
            let g = Tensor {
                shape: y.shape,
                data: y.data.iter().zip(&xb.data).map(|(a, b)| scale * (a - b)).collect(),
            };
            ae.backward(&g);
            opt.step(&mut ae.params_mut());
        }
        curve.push(total / x.n() as f64);
        log::info!("{stream} epoch {epoch}: reconstruction loss {:.6}", curve[epoch]);
    }
    Ok(curve)
}

pub const SAE_HIDDEN: [usize; 2] = [128, 64];

/// Stacked encoder `256 → 128 → 64` with sigmoid codes and a supervised
/// `64 → 512` sigmoid head.
#[derive(Debug, Clone)]
pub struct SaeModel {
    pub cfg: DenseConfig,
    e1: Linear,
    c1: Sigmoid,
    e2: Linear,
    c2: Sigmoid,
    head: Linear,
    out: Sigmoid,
}

pub fn build_sae(cfg: &DenseConfig) -> Result<SaeModel> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "sae-init", 0);
    let [h1, h2] = SAE_HIDDEN;
    Ok(SaeModel {
        cfg: cfg.clone(),
        e1: Linear::new(256, h1, &mut r),
        c1: Sigmoid::default(),
        e2: Linear::new(h1, h2, &mut r),
        c2: Sigmoid::default(),
        head: Linear::new(h2, TRIANGLE_COUNT, &mut r),
        out: Sigmoid::default(),
    })
}

impl SaeModel {
    /// Stacks two pre-trained encoders under a fresh head.
    pub fn from_autoencoders(cfg: &DenseConfig, ae1: &Autoencoder, ae2: &Autoencoder) -> Result<Self> {
        let mut m = build_sae(cfg)?;
        m.e1 = ae1.encoder.clone();
        m.e2 = ae2.encoder.clone();
        Ok(m)
    }

    fn layers(&mut self) -> [&mut dyn Module; 6] {
        [
            &mut self.e1,
            &mut self.c1,
            &mut self.e2,
            &mut self.c2,
            &mut self.head,
            &mut self.out,
        ]
    }

    /// The 64-wide code of the stacked encoder.
    pub fn codes(&self, x: &Tensor) -> Tensor {
        let mut m = self.clone();
        let mut h = x.clone();
        for l in &mut m.layers()[..4] {
            h = l.forward(&h, false);
        }
        h
    }

    pub fn batch(&self, frames: &[&ComplexFrame]) -> Tensor {
        magnitude_batch(frames, self.cfg.input_scale.unwrap_or(1.0))
    }

    pub fn infer_batch(&self, frames: &[&ComplexFrame]) -> Vec<TriVector> {
        let mut m = self.clone();
        outputs(&m.forward(&self.batch(frames), false))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Checkpoint::new("sae", &self.cfg)?;
        c.push_module("sae", self);
        c.save(path)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("sae")?;
        let mut m = build_sae(&c.config()?)?;
        c.load_module("sae", &mut m)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for SaeModel {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.clone();
        for l in self.layers() {
            h = l.forward(&h, train);
        }
        h
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut g = g.clone();
        for l in self.layers().into_iter().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.e1.params_mut();
        v.extend(self.e2.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.e1.params();
        v.extend(self.e2.params());
        v.extend(self.head.params());
        v
    }
}

/// Loss curves of the two pre-training stages and the supervised history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaeHistory {
    pub pretrain1: Vec<f64>,
    pub pretrain2: Vec<f64>,
    pub finetune: History,
}

/// Greedy layer-wise pre-training followed by supervised fine-tuning of the
/// stacked network.
pub fn train_sae(train: &[&Sample], val: &[&Sample], cfg: &DenseConfig) -> Result<(SaeModel, SaeHistory)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training needs a nonempty train split".into()));
    }
    let cfg = cfg.with_scale(train);
    cfg.validate()?;
    let frames: Vec<&ComplexFrame> = train.iter().map(|s| &s.frame).collect();
    let x = magnitude_batch(&frames, cfg.input_scale.unwrap_or(1.0));
    let mut r = rng::stream(cfg.seed, "sae-pretrain-init", 0);
    let [h1, h2] = SAE_HIDDEN;
    let mut ae1 = Autoencoder::new(256, h1, &mut r);
    let pretrain1 = pretrain_autoencoder(&mut ae1, &x, &cfg, "sae-ae1")?;
    let codes = ae1.encode(&x);
    let mut ae2 = Autoencoder::new(h1, h2, &mut r);
    let pretrain2 = pretrain_autoencoder(&mut ae2, &codes, &cfg, "sae-ae2")?;
    let mut model = SaeModel::from_autoencoders(&cfg, &ae1, &ae2)?;
    let finetune = fit(
        &mut model,
        |m, items| m.batch(&items.iter().map(|s| &s.frame).collect::<Vec<_>>()),
        train,
        val,
        &cfg.settings("sae"),
    )?;
    Ok((
        model,
        SaeHistory {
            pretrain1,
            pretrain2,
            finetune,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_module_sampled;
    use num_complex::Complex64;

    fn frame(f: impl Fn(usize, usize) -> Complex64) -> ComplexFrame {
        let mut fr = ComplexFrame::from_fn(f);
        fr.zero_diagonal();
        fr
    }

    #[test]
    fn magnitude_cases() {
        let m = magnitude_input(&frame(|_, _| Complex64::new(3.0, 4.0)));
        for e in 0..16 {
            for s in 0..16 {
                assert_eq!(m[e * 16 + s], if e == s { 0.0 } else { 5.0 });
            }
        }
        assert!(magnitude_input(&ComplexFrame::zeros()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn measurement_vector_layout() {
        let f = frame(|e, s| Complex64::new(e as f64, s as f64));
        let v = measurement_vector(&f);
        assert_eq!(v.len(), 480);
        assert_eq!((v[0], v[240]), (0.0, 1.0));
        assert_eq!((v[239], v[479]), (15.0, 14.0));
    }

    #[test]
    fn dense_models_shapes_and_gradients() {
        let cfg = DenseConfig::default();
        let x = Tensor::from_vec(
            [3, 256, 1, 1],
            (0..768).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect(),
        )
        .unwrap();
        let mut f = build_fcn(&cfg).unwrap();
        let y = f.forward(&x, false);
        assert_eq!(y.shape, [3, 512, 1, 1]);
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
        let rep = check_module_sampled(&mut f, &x, 1e-5, 4, 30);
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");

        let mut s = build_sae(&cfg).unwrap();
        assert_eq!(s.forward(&x, false).shape, [3, 512, 1, 1]);
        let rep = check_module_sampled(&mut s, &x, 1e-5, 5, 30);
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn stacked_codes_equal_autoencoder_codes() {
        let mut r = rng::stream(3, "t", 0);
        let ae1 = Autoencoder::new(256, 128, &mut r);
        let ae2 = Autoencoder::new(128, 64, &mut r);
        let s = SaeModel::from_autoencoders(&DenseConfig::default(), &ae1, &ae2).unwrap();
        let x = Tensor::from_vec([2, 256, 1, 1], (0..512).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        assert_eq!(s.codes(&x), ae2.encode(&ae1.encode(&x)));
    }

    #[test]
    fn pretraining_lowers_reconstruction_error() {
        let mut r = rng::stream(5, "t", 0);
        let x = Tensor::from_vec(
            [40, 256, 1, 1],
            (0..40 * 256)
                .map(|i| ((i % 256) as f64 / 64.0).cos() * (1.0 + (i / 256) as f64 * 0.01))
                .collect(),
        )
        .unwrap();
        let mut ae = Autoencoder::new(256, 128, &mut r);
        let cfg = DenseConfig {
            pretrain_epochs: 20,
            ..DenseConfig::default()
        };
        let curve = pretrain_autoencoder(&mut ae, &x, &cfg, "t").unwrap();
        assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
    }

    #[test]
    fn jacobian_gram_and_products() {
        let mut r = rng::stream(9, "t", 0);
        use rand::Rng;
        let j = Jacobian {
            data: (0..Jacobian::ROWS * Jacobian::COLS)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        };
        let g = j.gram();
        let (a, b) = (17, 300);
        let oracle: f64 = (0..Jacobian::ROWS).map(|k| j.get(k, a) * j.get(k, b)).sum();
        assert!((g[a * 512 + b] - oracle).abs() < 1e-9);
        let x: Vec<f64> = (0..512).map(|i| (i as f64).cos()).collect();
        let y = j.apply(&x);
        let oracle: f64 = (0..512).map(|c| j.get(5, c) * x[c]).sum();
        assert!((y[5] - oracle).abs() < 1e-9);
        let rr: Vec<f64> = (0..480).map(|i| (i as f64).sin()).collect();
        let z = j.apply_t(&rr);
        let oracle: f64 = (0..480).map(|k| j.get(k, 33) * rr[k]).sum();
        assert!((z[33] - oracle).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_nr_configs() {
        assert!(NrConfig {
            max_iterations: 0,
            ..NrConfig::default()
        }
        .validate()
        .is_err());
        assert!(NrConfig {
            alpha: Some(0.0),
            ..NrConfig::default()
        }
        .validate()
        .is_err());
    }
}
