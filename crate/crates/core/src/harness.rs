//! Experiment orchestration behind the `mitnet` CLI: dataset generation,
//! training of the four reconstructors, GAN enhancement, evaluation tables
//! and image dumps.
//!
//! Every evaluation follows the same path for every method:
//! reconstruct → smooth → render → (enhance) → binarize → score.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{train_fcn, train_sae, DenseConfig, FcnModel, NrConfig, NrSolver, SaeModel};
use crate::checkpoint::Checkpoint;
use crate::dataset::{flatten, generate, unflatten, Dataset, DatasetConfig, Manifest, Sample};
use crate::error::{Error, Result};
use crate::forward_sim::ComplexFrame;
use crate::gan::{train_gan, GanConfig, GanHistory, GanModel, GanPair};
use crate::geometry::{build_mesh, rasterize_phantom_to_image, tri_vector_to_image, FieldImage, TriMesh, TriVector};
use crate::metrics::{render_smoothed, score_image, Mask, THRESHOLD};
use crate::mitnet::{train_ccnn, CcnnModel, MitnetConfig};
use crate::parallel;
use crate::pgm::save_field_image;

/// Headline result on the private hardware data; synthetic runs are not
/// expected to reproduce it.
pub const HARDWARE_REFERENCE: &str = "hardware reference (not reproducible here): MITNet 82.25 % IoU, 3.31 px CD";

/// Shape label of the rows averaging over all shape classes.
pub const AVERAGE: &str = "average";

const INFER_CHUNK: usize = 64;
const EVAL_CHUNK: usize = 128;

// ---------------------------------------------------------------------------
// Methods and reconstructors

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The complex-valued U-net.
    Ccnn,
    Fcn,
    Sae,
    /// Gauss-Newton inversion.
    Nr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ccnn, Method::Fcn, Method::Sae, Method::Nr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ccnn => "ccnn",
            Method::Fcn => "fcn",
            Method::Sae => "sae",
            Method::Nr => "nr",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        self != Method::Nr
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}; expected ccnn, fcn, sae or nr")))
    }
}

/// What `train` can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Method(Method),
    Gan,
}

impl FromStr for Trainable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gan" => Ok(Trainable::Gan),
            "nr" => Err(Error::InvalidArgument(
                "nr is an optimization method and has nothing to train".into(),
            )),
            other => other.parse().map(Trainable::Method).map_err(|_| {
                Error::InvalidArgument(format!("unknown training target {s:?}; expected ccnn, fcn, sae or gan"))
            }),
        }
    }
}

/// A method with the checkpoint it is loaded from, written `method=path`
/// (or plain `nr`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodSpec {
    pub method: Method,
    pub checkpoint: Option<PathBuf>,
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, path) = match s.split_once('=') {
            Some((n, p)) => (n, Some(PathBuf::from(p))),
            None => (s, None),
        };
        let method: Method = name.parse()?;
        if method.needs_checkpoint() && path.is_none() {
            return Err(Error::InvalidArgument(format!(
                "{method} needs a checkpoint: use {method}=PATH"
            )));
        }
        Ok(Self {
            method,
            checkpoint: path,
        })
    }
}

/// A ready-to-use reconstructor of any method.
#[derive(Debug, Clone)]
pub enum Reconstructor {
    Ccnn(CcnnModel),
    Fcn(FcnModel),
    Sae(SaeModel),
    Nr(Box<NrSolver>),
}

impl Reconstructor {
    pub fn method(&self) -> Method {
        match self {
            Reconstructor::Ccnn(_) => Method::Ccnn,
            Reconstructor::Fcn(_) => Method::Fcn,
            Reconstructor::Sae(_) => Method::Sae,
            Reconstructor::Nr(_) => Method::Nr,
        }
    }

    /// Loads a trained network, or builds the Gauss-Newton solver.
    pub fn load(spec: &MethodSpec, nr: &NrConfig) -> Result<Self> {
        if spec.method == Method::Nr {
            return Ok(Reconstructor::Nr(Box::new(NrSolver::new(nr)?)));
        }
        let path = spec
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs a checkpoint", spec.method)))?;
        let c = Checkpoint::load(path)?;
        Ok(match spec.method {
            Method::Ccnn => Reconstructor::Ccnn(CcnnModel::from_checkpoint(&c)?),
            Method::Fcn => Reconstructor::Fcn(FcnModel::from_checkpoint(&c)?),
            Method::Sae => Reconstructor::Sae(SaeModel::from_checkpoint(&c)?),
            Method::Nr => unreachable!(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Reconstructor::Ccnn(m) => m.save(path),
            Reconstructor::Fcn(m) => m.save(path),
            Reconstructor::Sae(m) => m.save(path),
            Reconstructor::Nr(_) => Err(Error::InvalidArgument("nr has no trainable state to save".into())),
        }
    }

    /// Triangle vectors in `[0, 1]`, one per frame, in input order.
    pub fn reconstruct(&self, frames: &[&ComplexFrame]) -> Result<Vec<TriVector>> {
        let chunked =
            |f: &dyn Fn(&[&ComplexFrame]) -> Vec<TriVector>| frames.chunks(INFER_CHUNK).flat_map(f).collect::<Vec<_>>();
        match self {
            Reconstructor::Ccnn(m) => Ok(chunked(&|c| m.infer_batch(c))),
            Reconstructor::Fcn(m) => Ok(chunked(&|c| m.infer_batch(c))),
            Reconstructor::Sae(m) => Ok(chunked(&|c| m.infer_batch(c))),
            Reconstructor::Nr(s) => parallel::map_slice(frames, |f| s.reconstruct(f).map(|r| r.image))
                .into_iter()
                .collect(),
        }
    }

    pub fn reconstruct_samples(&self, samples: &[&Sample]) -> Result<Vec<TriVector>> {
        let frames: Vec<&ComplexFrame> = samples.iter().map(|s| &s.frame).collect();
        self.reconstruct(&frames)
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Everything one experiment needs. Loaded from TOML on top of the desk or
/// paper-scale defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Train a GAN on the pooled reconstructions and report enhanced scores.
    pub enhance: bool,
    /// Test samples per shape class written to `images/`.
    pub image_dumps: usize,
    pub dataset: DatasetConfig,
    pub mitnet: MitnetConfig,
    pub fcn: DenseConfig,
    pub sae: DenseConfig,
    pub nr: NrConfig,
    pub gan: GanConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Single-CPU budget: 12 mm sweep, short training runs and a narrow GAN.
    pub fn desk() -> Self {
        let dense = DenseConfig {
            epochs: 60,
            patience: Some(10),
            pretrain_epochs: 30,
            ..DenseConfig::default()
        };
        Self {
            seed: 42,
            methods: Method::ALL.to_vec(),
            enhance: true,
            image_dumps: 1,
            dataset: DatasetConfig::desk(),
            mitnet: MitnetConfig {
                learning_rate: 1e-4,
                epochs: 12,
                patience: Some(5),
                ..MitnetConfig::default()
            },
            fcn: dense.clone(),
            sae: dense,
            nr: NrConfig::default(),
            gan: GanConfig {
                generator_widths: [4, 8, 16, 32, 64],
                discriminator_widths: [8, 16, 32, 64],
                epochs: 4,
                batch_size: 4,
                pairs_per_epoch: Some(256),
                validation_pairs: 32,
                ..GanConfig::default()
            },
        }
        .with_seed(42)
    }

    /// The published protocol: full sweep and the published training budget.
    pub fn paper_scale() -> Self {
        Self {
            seed: 42,
            methods: Method::ALL.to_vec(),
            enhance: true,
            image_dumps: 3,
            dataset: DatasetConfig::paper_scale(),
            mitnet: MitnetConfig::default(),
            fcn: DenseConfig::default(),
            sae: DenseConfig::default(),
            nr: NrConfig::default(),
            gan: GanConfig::default(),
        }
        .with_seed(42)
    }

    /// Sets the master seed and every component seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.mitnet.seed = seed;
        self.fcn.seed = seed;
        self.sae.seed = seed;
        self.gan.seed = seed;
        self
    }

    /// Overlays the TOML file at `path` on `base`.
    pub fn load(path: &Path, base: Self) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(detail) => Error::Format {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str, base: Self) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config(
                "methods must list at least one of ccnn, fcn, sae, nr".into(),
            ));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config(format!(
                "methods lists a method twice: {:?}",
                self.methods
            )));
        }
        self.dataset.validate()?;
        self.mitnet.validate()?;
        self.fcn.validate()?;
        self.sae.validate()?;
        self.nr.validate()?;
        self.gan.validate()
    }

    /// Gauss-Newton settings linearized at the background of `dataset`.
    pub fn nr_for(&self, dataset: &DatasetConfig) -> NrConfig {
        NrConfig {
            background_sigma: dataset.background_sigma,
            frequency_hz: dataset.frequency_hz,
            ..self.nr.clone()
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scores and reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScore {
    pub sample_id: usize,
    pub object: String,
    pub method: Method,
    pub enhanced: bool,
    pub iou: f64,
    /// `None` when the binarized reconstruction is empty.
    pub cd: Option<f64>,
}

/// Mean scores of one method on one shape class (or on all of them).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: Method,
    pub shape: String,
    pub enhanced: bool,
    pub mean_iou: f64,
    /// Mean over samples with a nonempty reconstruction.
    pub mean_cd: Option<f64>,
    pub samples: usize,
    pub empty_reconstructions: usize,
}

/// Rows for every method × (each shape + average) × enhancement state.
pub fn aggregate(scores: &[SampleScore], shapes: &[String], methods: &[Method], states: &[bool]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for &method in methods {
        for &enhanced in states {
            let group: Vec<&SampleScore> = scores
                .iter()
                .filter(|s| s.method == method && s.enhanced == enhanced)
                .collect();
            for shape in shapes.iter().map(String::as_str).chain([AVERAGE]) {
                let members: Vec<&SampleScore> = group
                    .iter()
                    .copied()
                    .filter(|s| shape == AVERAGE || s.object == shape)
                    .collect();
                let n = members.len();
                let mean_iou = members.iter().map(|s| s.iou).sum::<f64>() / n as f64;
                let cds: Vec<f64> = members.iter().filter_map(|s| s.cd).collect();
                rows.push(ReportRow {
                    method,
                    shape: shape.to_string(),
                    enhanced,
                    mean_iou,
                    mean_cd: (!cds.is_empty()).then(|| cds.iter().sum::<f64>() / cds.len() as f64),
                    samples: n,
                    empty_reconstructions: n - cds.len(),
                });
            }
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn samples_csv(scores: &[SampleScore]) -> String {
    let mut s = String::from("sample_id,object,method,enhanced,iou,cd\n");
    for r in scores {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.sample_id,
            r.object,
            r.method,
            r.enhanced,
            r.iou,
            opt(r.cd)
        );
    }
    s
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("method,shape,enhanced,mean_iou,mean_cd,samples,empty_reconstructions\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method,
            r.shape,
            r.enhanced,
            r.mean_iou,
            opt(r.mean_cd),
            r.samples,
            r.empty_reconstructions
        );
    }
    s
}

/// Fixed-width summary table with the hardware reference in its header.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut s = format!("# {HARDWARE_REFERENCE}\n");
    let _ = writeln!(
        s,
        "{:<6} {:<8} {:<8} {:>9} {:>8} {:>7} {:>6}",
        "method", "shape", "enhanced", "IoU %", "CD px", "samples", "empty"
    );
    for r in rows {
        let cd = r.mean_cd.map(|c| format!("{c:.2}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<6} {:<8} {:<8} {:>9.2} {:>8} {:>7} {:>6}",
            r.method.name(),
            r.shape,
            r.enhanced,
            r.mean_iou,
            cd,
            r.samples,
            r.empty_reconstructions
        );
    }
    s
}

/// Per-sample scores with their aggregate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<SampleScore>,
    pub rows: Vec<ReportRow>,
}

impl Evaluation {
    pub fn row(&self, method: Method, shape: &str, enhanced: bool) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.shape == shape && r.enhanced == enhanced)
    }

    /// Writes `report.csv`, `report_samples.csv` and `report.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("report.csv"), &report_csv(&self.rows))?;
        write_text(&dir.join("report_samples.csv"), &samples_csv(&self.scores))?;
        write_text(&dir.join("report.txt"), &report_table(&self.rows))
    }
}

fn truth_mask(sample: &Sample) -> Result<Mask> {
    Ok(Mask::from_image(
        &rasterize_phantom_to_image(&sample.phantom)?,
        THRESHOLD,
    ))
}

/// Scores `outputs` (aligned with `samples`) raw and, with a GAN, enhanced.
pub fn evaluate(
    dataset: &Dataset,
    samples: &[&Sample],
    outputs: &[(Method, Vec<TriVector>)],
    gan: Option<&GanModel>,
    mesh: &TriMesh,
) -> Result<Evaluation> {
    let mut scores = Vec::new();
    for (method, recon) in outputs {
        if recon.len() != samples.len() {
            return Err(Error::shape(samples.len(), recon.len()));
        }
        let mut raw = Vec::with_capacity(samples.len());
        let mut enhanced = Vec::new();
        for (chunk, outs) in samples.chunks(EVAL_CHUNK).zip(recon.chunks(EVAL_CHUNK)) {
            let truths: Vec<Mask> = parallel::map_slice(chunk, |s| truth_mask(s))
                .into_iter()
                .collect::<Result<_>>()?;
            let conds = parallel::map_slice(outs, |v| render_smoothed(v, mesh));
            raw.extend(parallel::map_range(chunk.len(), |i| {
                score_image(&conds[i], &truths[i], THRESHOLD)
            }));
            if let Some(g) = gan {
                let out = g.enhance_batch(&conds);
                enhanced.extend(parallel::map_range(chunk.len(), |i| {
                    score_image(&out[i], &truths[i], THRESHOLD)
                }));
            }
        }
        for (flag, list) in [(false, &raw), (true, &enhanced)] {
            for (s, sc) in samples.iter().zip(list.iter()) {
                scores.push(SampleScore {
                    sample_id: s.id,
                    object: dataset.objects[s.object].name.clone(),
                    method: *method,
                    enhanced: flag,
                    iou: sc.iou,
                    cd: sc.cd,
                });
            }
        }
    }
    let shapes: Vec<String> = dataset.objects.iter().map(|o| o.name.clone()).collect();
    let methods: Vec<Method> = outputs.iter().map(|(m, _)| *m).collect();
    let states: &[bool] = if gan.is_some() { &[false, true] } else { &[false] };
    let rows = aggregate(&scores, &shapes, &methods, states);
    Ok(Evaluation { scores, rows })
}

fn mask_image(m: &Mask) -> FieldImage {
    FieldImage::from_pixels(m.bits().iter().map(|&b| f64::from(u8::from(b))).collect()).expect("256×256 mask")
}

/// Writes truth, rendering, mask and enhanced images of the first
/// `per_shape` samples of each shape class under `dir/sample_<id>/`.
pub fn dump_images(
    dir: &Path,
    dataset: &Dataset,
    samples: &[&Sample],
    outputs: &[(Method, Vec<TriVector>)],
    gan: Option<&GanModel>,
    mesh: &TriMesh,
    per_shape: usize,
) -> Result<()> {
    let mut picked = Vec::new();
    for object in 0..dataset.objects.len() {
        picked.extend(
            samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.object == object)
                .take(per_shape)
                .map(|(i, _)| i),
        );
    }
    for i in picked {
        let s = samples[i];
        let sdir = dir.join(format!("sample_{:05}", s.id));
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        save_field_image(&rasterize_phantom_to_image(&s.phantom)?, &sdir.join("truth.pgm"))?;
        for (method, recon) in outputs {
            let cond = render_smoothed(&recon[i], mesh);
            save_field_image(
                &tri_vector_to_image(&recon[i], mesh),
                &sdir.join(format!("{method}_raw.pgm")),
            )?;
            save_field_image(&cond, &sdir.join(format!("{method}.pgm")))?;
            save_field_image(
                &mask_image(&Mask::from_image(&cond, THRESHOLD)),
                &sdir.join(format!("{method}_mask.pgm")),
            )?;
            if let Some(g) = gan {
                let e = crate::gan::enhance(g, &cond);
                save_field_image(&e, &sdir.join(format!("{method}_enhanced.pgm")))?;
                save_field_image(
                    &mask_image(&Mask::from_image(&e, THRESHOLD)),
                    &sdir.join(format!("{method}_enhanced_mask.pgm")),
                )?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Files

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A frame as 16 rows of 32 comma-separated values: real parts, then
/// imaginary parts.
pub fn frame_csv(frame: &ComplexFrame) -> String {
    flatten(frame)
        .iter()
        .map(|row| row.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

pub fn write_frame_csv(frame: &ComplexFrame, path: &Path) -> Result<()> {
    write_text(path, &frame_csv(frame))
}

pub fn read_frame_csv(path: &Path) -> Result<ComplexFrame> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    unflatten(&rows).map_err(|e| bad(e.to_string()))
}

pub fn tri_vector_csv(v: &TriVector) -> String {
    let mut s = String::from("triangle,value\n");
    for (i, x) in v.as_slice().iter().enumerate() {
        let _ = writeln!(s, "{i},{x}");
    }
    s
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    crate_version: &'static str,
    parallel: bool,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_sha256: Option<&'a str>,
    reference: &'static str,
    config: &'a ExperimentConfig,
}

/// Writes the command, versions, seeds and the full configuration.
pub fn write_provenance(
    path: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    dataset_sha256: Option<&str>,
) -> Result<()> {
    let p = Provenance {
        command,
        crate_version: env!("CARGO_PKG_VERSION"),
        parallel: cfg!(feature = "parallel"),
        seed: cfg.seed,
        dataset_sha256,
        reference: HARDWARE_REFERENCE,
        config: cfg,
    };
    let text = toml::to_string_pretty(&p).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &text)
}

fn dataset_sha(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        path,
        detail: e.to_string(),
    })?;
    Ok(m.sha256)
}

// ---------------------------------------------------------------------------
// Training

/// Trains one network on the train split (model selection on validation),
/// writing its loss curves as `<prefix>_loss.csv` in `logs`.
pub fn train_method(method: Method, cfg: &ExperimentConfig, dataset: &Dataset, logs: &Path) -> Result<Reconstructor> {
    let (train, val) = (dataset.train(), dataset.val());
    log::info!(
        "training {method} on {} samples ({} validation)",
        train.len(),
        val.len()
    );
    let loss = logs.join(format!("{method}_loss.csv"));
    match method {
        Method::Ccnn => {
            let (m, h) = train_ccnn(&train, &val, &cfg.mitnet)?;
            write_text(&loss, &h.to_csv())?;
            Ok(Reconstructor::Ccnn(m))
        }
        Method::Fcn => {
            let (m, h) = train_fcn(&train, &val, &cfg.fcn)?;
            write_text(&loss, &h.to_csv())?;
            Ok(Reconstructor::Fcn(m))
        }
        Method::Sae => {
            let (m, h) = train_sae(&train, &val, &cfg.sae)?;
            write_text(&loss, &h.finetune.to_csv())?;
            let mut s = String::from("epoch,autoencoder1_mse,autoencoder2_mse\n");
            for (i, (a, b)) in h.pretrain1.iter().zip(&h.pretrain2).enumerate() {
                let _ = writeln!(s, "{i},{a},{b}");
            }
            write_text(&logs.join("sae_pretrain.csv"), &s)?;
            Ok(Reconstructor::Sae(m))
        }
        Method::Nr => Ok(Reconstructor::Nr(Box::new(NrSolver::new(
            &cfg.nr_for(&dataset.config),
        )?))),
    }
}

/// Pairs each sample with every method's reconstruction of it, sample-major.
pub fn gan_pairs(samples: &[&Sample], outputs: &[Vec<TriVector>]) -> Vec<GanPair> {
    let mut pairs = Vec::with_capacity(samples.len() * outputs.len());
    for (i, s) in samples.iter().enumerate() {
        for o in outputs {
            pairs.push(GanPair {
                condition: o[i].clone(),
                truth: s.phantom,
            });
        }
    }
    pairs
}

/// At most `k` items spread evenly over `items`.
fn spread<T: Clone>(items: &[T], k: usize) -> Vec<T> {
    if items.len() <= k {
        return items.to_vec();
    }
    (0..k).map(|i| items[i * items.len() / k].clone()).collect()
}

fn train_gan_on(
    train: &[GanPair],
    val: &[GanPair],
    mesh: &TriMesh,
    cfg: &GanConfig,
    logs: &Path,
) -> Result<(GanModel, GanHistory)> {
    let val = spread(val, cfg.validation_pairs);
    log::info!("training GAN on {} pairs ({} validation)", train.len(), val.len());
    let (g, h) = train_gan(train, &val, mesh, cfg)?;
    write_text(&logs.join("gan_loss.csv"), &h.to_csv())?;
    Ok((g, h))
}

// ---------------------------------------------------------------------------
// Full pipeline

/// Everything a full run produced.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub manifest: Manifest,
    pub evaluation: Evaluation,
    pub gan_history: Option<GanHistory>,
}

/// Generates the dataset, trains every configured method, trains a GAN on
/// the pooled train-split reconstructions and evaluates the test split.
///
/// Layout of `out`: `data/`, `mesh.txt`, `checkpoints/`, `logs/`,
/// `images/`, `report.csv`, `report_samples.csv`, `report.txt`,
/// `provenance.toml`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mesh = build_mesh();
    mesh.save_text(&out.join("mesh.txt"))?;
    log::info!("generating dataset");
    let dataset = generate(&cfg.dataset)?;
    let manifest = dataset.save(&out.join("data"))?;
    write_provenance(&out.join("provenance.toml"), "run", cfg, Some(&manifest.sha256))?;
    let (ckpts, logs) = (out.join("checkpoints"), out.join("logs"));
    fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;

    let (train, val, test) = (dataset.train(), dataset.val(), dataset.test());
    let mut test_outputs = Vec::new();
    let (mut train_outputs, mut val_outputs) = (Vec::new(), Vec::new());
    for &method in &cfg.methods {
        let r = train_method(method, cfg, &dataset, &logs)?;
        if method.needs_checkpoint() {
            r.save(&ckpts.join(format!("{method}.ckpt")))?;
        }
        log::info!("reconstructing with {method}");
        test_outputs.push((method, r.reconstruct_samples(&test)?));
        if cfg.enhance {
            train_outputs.push(r.reconstruct_samples(&train)?);
            val_outputs.push(r.reconstruct_samples(&val)?);
        }
    }

    let mut gan_history = None;
    let gan = if cfg.enhance {
        let train_pairs = gan_pairs(&train, &train_outputs);
        let val_pairs = gan_pairs(&val, &val_outputs);
        drop(train_outputs);
        let (g, h) = train_gan_on(&train_pairs, &val_pairs, &mesh, &cfg.gan, &logs)?;
        g.save(&ckpts.join("gan.ckpt"))?;
        gan_history = Some(h);
        Some(g)
    } else {
        None
    };

    log::info!("evaluating {} test samples", test.len());
    let evaluation = evaluate(&dataset, &test, &test_outputs, gan.as_ref(), &mesh)?;
    evaluation.write(out)?;
    dump_images(
        &out.join("images"),
        &dataset,
        &test,
        &test_outputs,
        gan.as_ref(),
        &mesh,
        cfg.image_dumps,
    )?;
    Ok(ExperimentOutcome {
        manifest,
        evaluation,
        gan_history,
    })
}

// ---------------------------------------------------------------------------
// CLI commands

/// Generates and saves the dataset with its manifest and the mesh.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let dataset = generate(&cfg.dataset)?;
    let manifest = dataset.save(out)?;
    build_mesh().save_text(&out.join("mesh.txt"))?;
    write_provenance(&out.join("provenance.toml"), "gen-data", cfg, Some(&manifest.sha256))?;
    log::info!("{} samples written to {}", manifest.total_samples, out.display());
    Ok(manifest)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Trains `target` on the dataset in `data` and writes the checkpoint to
/// `out`, with `<stem>.loss.csv` and `<stem>.provenance.toml` beside it.
/// The GAN is trained on the reconstructions of the `conditions` methods.
pub fn cmd_train(
    target: Trainable,
    data: &Path,
    out: &Path,
    cfg: &ExperimentConfig,
    conditions: &[MethodSpec],
) -> Result<()> {
    cfg.validate()?;
    let dataset = Dataset::load(data)?;
    let logs = staging_dir(out)?;
    match target {
        Trainable::Method(method) => {
            let r = train_method(method, cfg, &dataset, &logs)?;
            r.save(out)?;
            move_file(&logs.join(format!("{method}_loss.csv")), &sidecar(out, "loss.csv"))?;
            if method == Method::Sae {
                move_file(&logs.join("sae_pretrain.csv"), &sidecar(out, "pretrain.csv"))?;
            }
        }
        Trainable::Gan => {
            if conditions.is_empty() {
                return Err(Error::InvalidArgument(
                    "gan training needs at least one condition source (--condition METHOD=CHECKPOINT)".into(),
                ));
            }
            let nr = cfg.nr_for(&dataset.config);
            let (train, val) = (dataset.train(), dataset.val());
            let (mut tr, mut va) = (Vec::new(), Vec::new());
            for spec in conditions {
                let r = Reconstructor::load(spec, &nr)?;
                tr.push(r.reconstruct_samples(&train)?);
                va.push(r.reconstruct_samples(&val)?);
            }
            let mesh = build_mesh();
            let (g, _) = train_gan_on(&gan_pairs(&train, &tr), &gan_pairs(&val, &va), &mesh, &cfg.gan, &logs)?;
            g.save(out)?;
            move_file(&logs.join("gan_loss.csv"), &sidecar(out, "loss.csv"))?;
        }
    }
    let _ = fs::remove_dir_all(&logs);
    let command = match target {
        Trainable::Method(m) => format!("train {m}"),
        Trainable::Gan => "train gan".into(),
    };
    write_provenance(
        &sidecar(out, "provenance.toml"),
        &command,
        cfg,
        Some(&dataset_sha(data)?),
    )
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let dir = sidecar(out, "logs.tmp");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn move_file(from: &Path, to: &Path) -> Result<()> {
    fs::rename(from, to).map_err(|e| Error::io(to, e))
}

/// Where `reconstruct` reads its frame from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSource {
    /// A frame CSV (16 rows × 32 values).
    Csv(PathBuf),
    /// One sample of a dataset directory; the first test sample when `id`
    /// is `None`.
    Sample { data: PathBuf, id: Option<usize> },
}

/// Files written by `reconstruct`, and the scores when the truth is known.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionOutput {
    pub files: Vec<PathBuf>,
    pub raw: Option<crate::metrics::Score>,
    pub enhanced: Option<crate::metrics::Score>,
}

/// Reconstructs one frame and writes `reconstruction.csv` (triangle
/// values), `raw.pgm` (unsmoothed rendering), `smoothed.pgm`, `mask.pgm`
/// and, with a GAN checkpoint, `enhanced.pgm` and `enhanced_mask.pgm`. A
/// dataset sample also gets `truth.pgm`.
pub fn cmd_reconstruct(
    spec: &MethodSpec,
    source: &FrameSource,
    enhance: Option<&Path>,
    out: &Path,
    cfg: &ExperimentConfig,
) -> Result<ReconstructionOutput> {
    let (frame, truth, dataset_cfg) = match source {
        FrameSource::Csv(p) => (read_frame_csv(p)?, None, cfg.dataset.clone()),
        FrameSource::Sample { data, id } => {
            let ds = Dataset::load(data)?;
            let id = match id {
                Some(i) => *i,
                None => *ds
                    .splits
                    .test
                    .first()
                    .ok_or_else(|| Error::InvalidArgument("test split is empty".into()))?,
            };
            let s = ds
                .samples
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {id} not in dataset of {}", ds.samples.len())))?;
            (
                s.frame.clone(),
                Some(rasterize_phantom_to_image(&s.phantom)?),
                ds.config.clone(),
            )
        }
    };
    let r = Reconstructor::load(spec, &cfg.nr_for(&dataset_cfg))?;
    let v = r.reconstruct(&[&frame])?.pop().expect("one reconstruction");
    let mesh = build_mesh();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut put_img = |name: &str, img: &FieldImage| -> Result<()> {
        let p = out.join(name);
        save_field_image(img, &p)?;
        files.push(p);
        Ok(())
    };
    let smoothed = render_smoothed(&v, &mesh);
    put_img("raw.pgm", &tri_vector_to_image(&v, &mesh))?;
    put_img("smoothed.pgm", &smoothed)?;
    put_img("mask.pgm", &mask_image(&Mask::from_image(&smoothed, THRESHOLD)))?;
    let enhanced = match enhance {
        Some(p) => {
            let g = GanModel::load(p)?;
            let e = crate::gan::enhance(&g, &smoothed);
            put_img("enhanced.pgm", &e)?;
            put_img("enhanced_mask.pgm", &mask_image(&Mask::from_image(&e, THRESHOLD)))?;
            Some(e)
        }
        None => None,
    };
    let truth_mask = truth.as_ref().map(|t| Mask::from_image(t, THRESHOLD));
    if let Some(t) = &truth {
        put_img("truth.pgm", t)?;
    }
    let csv = out.join("reconstruction.csv");
    write_text(&csv, &tri_vector_csv(&v))?;
    files.push(csv);
    let score = |img: &FieldImage| truth_mask.as_ref().map(|m| score_image(img, m, THRESHOLD));
    Ok(ReconstructionOutput {
        raw: score(&smoothed),
        enhanced: enhanced.as_ref().and_then(score),
        files,
    })
}

/// Evaluates the test split of `data` for each method, raw and (with a GAN
/// checkpoint) enhanced, writing the reports and provenance into `out`.
pub fn cmd_eval(
    data: &Path,
    specs: &[MethodSpec],
    enhance: Option<&Path>,
    out: &Path,
    cfg: &ExperimentConfig,
) -> Result<Evaluation> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("eval needs at least one --method".into()));
    }
    let dataset = Dataset::load(data)?;
    let nr = cfg.nr_for(&dataset.config);
    let gan = enhance.map(GanModel::load).transpose()?;
    let test = dataset.test();
    let mut outputs = Vec::new();
    for spec in specs {
        let r = Reconstructor::load(spec, &nr)?;
        log::info!("reconstructing {} test samples with {}", test.len(), spec.method);
        outputs.push((spec.method, r.reconstruct_samples(&test)?));
    }
    let mesh = build_mesh();
    let evaluation = evaluate(&dataset, &test, &outputs, gan.as_ref(), &mesh)?;
    evaluation.write(out)?;
    dump_images(
        &out.join("images"),
        &dataset,
        &test,
        &outputs,
        gan.as_ref(),
        &mesh,
        cfg.image_dumps,
    )?;
    write_provenance(&out.join("provenance.toml"), "eval", cfg, Some(&dataset_sha(data)?))?;
    Ok(evaluation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(id: usize, object: &str, method: Method, enhanced: bool, iou: f64, cd: Option<f64>) -> SampleScore {
        SampleScore {
            sample_id: id,
            object: object.into(),
            method,
            enhanced,
            iou,
            cd,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("mitnet".parse::<Method>().is_err());
        assert_eq!("gan".parse::<Trainable>().unwrap(), Trainable::Gan);
        assert_eq!("sae".parse::<Trainable>().unwrap(), Trainable::Method(Method::Sae));
        assert!("nr".parse::<Trainable>().is_err());
    }

    #[test]
    fn method_specs() {
        let s: MethodSpec = "ccnn=/tmp/a.ckpt".parse().unwrap();
        assert_eq!(s.method, Method::Ccnn);
        assert_eq!(s.checkpoint.as_deref(), Some(Path::new("/tmp/a.ckpt")));
        assert_eq!("nr".parse::<MethodSpec>().unwrap().checkpoint, None);
        assert!("fcn".parse::<MethodSpec>().is_err());
        assert!("xyz=a".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn aggregate_schema_and_means() {
        let shapes = vec!["A".to_string(), "B".to_string()];
        let scores = vec![
            score(0, "A", Method::Ccnn, false, 50.0, Some(2.0)),
            score(1, "A", Method::Ccnn, false, 70.0, None),
            score(2, "B", Method::Ccnn, false, 90.0, Some(4.0)),
            score(0, "A", Method::Ccnn, true, 60.0, Some(1.0)),
            score(1, "A", Method::Ccnn, true, 80.0, Some(3.0)),
            score(2, "B", Method::Ccnn, true, 100.0, Some(0.0)),
        ];
        let rows = aggregate(&scores, &shapes, &[Method::Ccnn], &[false, true]);
        assert_eq!(rows.len(), 2 * 3);
        let a = &rows[0];
        assert_eq!(
            (a.shape.as_str(), a.enhanced, a.samples, a.empty_reconstructions),
            ("A", false, 2, 1)
        );
        assert_eq!(a.mean_iou, 60.0);
        assert_eq!(a.mean_cd, Some(2.0));
        let avg = &rows[2];
        assert_eq!(avg.shape, AVERAGE);
        assert!((avg.mean_iou - 70.0).abs() < 1e-12);
        assert_eq!(avg.mean_cd, Some(3.0));
        assert_eq!(rows[5].mean_cd, Some(4.0 / 3.0));
    }

    #[test]
    fn csv_layouts() {
        let rows = aggregate(
            &[score(3, "A", Method::Nr, false, 12.5, None)],
            &["A".into()],
            &[Method::Nr],
            &[false],
        );
        let csv = report_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "method,shape,enhanced,mean_iou,mean_cd,samples,empty_reconstructions"
        );
        assert_eq!(lines[1], "nr,A,false,12.5,,1,1");
        assert_eq!(lines[2], "nr,average,false,12.5,,1,1");
        let s = samples_csv(&[score(3, "A", Method::Nr, true, 12.5, Some(1.5))]);
        assert_eq!(s.lines().nth(1), Some("3,A,nr,true,12.5,1.5"));
        assert!(report_table(&rows).starts_with("# hardware reference"));
    }

    #[test]
    fn frame_csv_round_trip() {
        let f = ComplexFrame::from_fn(|e, s| {
            if e == s {
                num_complex::Complex64::new(0.0, 0.0)
            } else {
                num_complex::Complex64::new(e as f64 * 0.1 + 1e-9, -(s as f64) / 3.0)
            }
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_frame_csv(&f, &p).unwrap();
        assert_eq!(read_frame_csv(&p).unwrap(), f);
        fs::write(&p, "1,2,3\n").unwrap();
        assert!(read_frame_csv(&p).is_err());
    }

    #[test]
    fn config_overlay() {
        let base = ExperimentConfig::desk();
        let cfg = ExperimentConfig::from_toml("methods = [\"nr\"]\n[mitnet]\nepochs = 3\n", base.clone()).unwrap();
        assert_eq!(cfg.methods, vec![Method::Nr]);
        assert_eq!(cfg.mitnet.epochs, 3);
        assert_eq!(cfg.mitnet.learning_rate, base.mitnet.learning_rate);
        assert_eq!(cfg.dataset, base.dataset);
        let err = ExperimentConfig::from_toml("[mitnet]\nepoch = 3\n", base.clone()).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        assert!(ExperimentConfig::from_toml("methods = []\n", base.clone()).is_err());
        let paper = ExperimentConfig::from_toml("", ExperimentConfig::paper_scale()).unwrap();
        assert_eq!(paper, ExperimentConfig::paper_scale());
    }

    #[test]
    fn seeds_propagate() {
        let c = ExperimentConfig::desk().with_seed(7);
        assert_eq!(
            [
                c.seed,
                c.dataset.seed,
                c.mitnet.seed,
                c.fcn.seed,
                c.sae.seed,
                c.gan.seed
            ],
            [7; 6]
        );
    }

    #[test]
    fn spread_picks_evenly() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(spread(&v, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(spread(&v, 20), v);
    }
}
