//! Synthetic phantom sweeps, the `MITD` sample container and
//! position-level splits.
//!
//! Samples are ordered object → position → repetition. Each repetition is
//! an independent noise draw on the same clean differential frame.
//!
//! The binary container holds, in little-endian order: magic `MITD`,
//! format version (u32), sample count (u32), then per sample the phantom
//! shape id (u8), size, conductivity, x, y and orientation (f32 each), the
//! frame as 512 f32 (16×16 real plane then 16×16 imaginary plane) and the
//! label as 512 f32. A TOML manifest next to it echoes the configuration
//! and lists the splits.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward_sim::{
    add_noise_with, ComplexFrame, FemModel, MaterialMap, NoiseModel, DEFAULT_BACKGROUND_SIGMA, DEFAULT_FREQUENCY_HZ,
    DEFAULT_SNR_DB, MU_0,
};
use crate::geometry::{
    build_mesh, conductivity_map, rasterize_phantom_to_tri, Phantom, PhantomShape, Point2, TriMesh, TriVector,
    FIELD_RADIUS_MM, TRIANGLE_COUNT,
};
use crate::{parallel, rng};

pub const FORMAT_VERSION: u32 = 1;
pub const DATA_FILE: &str = "samples.mitd";
pub const MANIFEST_FILE: &str = "manifest.toml";
const MAGIC: &[u8; 4] = b"MITD";
const RECORD_BYTES: usize = 1 + 5 * 4 + 2 * 512 * 4;

/// One phantom class swept over the field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: PhantomShape,
    /// Diameter (cylinder) or side length (prism), mm.
    pub size: f64,
    /// S/m.
    pub conductivity: f64,
    /// Prism orientation, rad.
    #[serde(default)]
    pub orientation: f64,
    /// Grid step, mm.
    pub step_mm: f64,
    pub repetitions: usize,
}

impl ObjectSpec {
    pub fn phantom_at(&self, center: Point2) -> Phantom {
        Phantom {
            shape: self.shape,
            size: self.size,
            conductivity: self.conductivity,
            center,
            orientation: self.orientation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub objects: Vec<ObjectSpec>,
    pub snr_db: f64,
    pub frequency_hz: f64,
    pub background_sigma: f64,
    pub seed: u64,
    /// Train/validation/test fractions of the positions of each object.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DatasetConfig {
    /// Desk-scale sweep: 12 mm grid, two noise draws per position.
    pub fn desk() -> Self {
        Self::with_steps([12.0, 12.0, 12.0], [2, 2, 2])
    }

    /// The hardware protocol: 4 mm grid for cylinders, 5 mm for the prism.
    pub fn paper_scale() -> Self {
        Self::with_steps([4.0, 4.0, 5.0], [3, 4, 3])
    }

    fn with_steps(steps: [f64; 3], reps: [usize; 3]) -> Self {
        let obj = |name: &str, shape, size, conductivity, k: usize| ObjectSpec {
            name: name.into(),
            shape,
            size,
            conductivity,
            orientation: 0.0,
            step_mm: steps[k],
            repetitions: reps[k],
        };
        Self {
            objects: vec![
                obj("CY-35", PhantomShape::Cylinder, 35.0, 3.0, 0),
                obj("CY-30", PhantomShape::Cylinder, 30.0, 2.0, 1),
                obj("PR", PhantomShape::TriangularPrism, 40.0, 2.0, 2),
            ],
            snr_db: DEFAULT_SNR_DB,
            frequency_hz: DEFAULT_FREQUENCY_HZ,
            background_sigma: DEFAULT_BACKGROUND_SIGMA,
            seed: 42,
            split: [0.8, 0.1, 0.1],
        }
    }

    pub fn background(&self) -> MaterialMap {
        MaterialMap {
            sigma: vec![self.background_sigma; TRIANGLE_COUNT],
            mu: MU_0,
            omega: 2.0 * std::f64::consts::PI * self.frequency_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Config("at least one object is required".into()));
        }
        for o in &self.objects {
            if !(o.step_mm > 0.0) || o.repetitions == 0 || !(o.size >= 0.0) || !(o.conductivity >= 0.0) {
                return Err(Error::Config(format!(
                    "object {}: invalid step, size, conductivity or repetitions",
                    o.name
                )));
            }
        }
        if !(self.snr_db > 0.0) || !(self.frequency_hz > 0.0) || !(self.background_sigma >= 0.0) {
            return Err(Error::Config("snr_db and frequency_hz must be positive".into()));
        }
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| *r < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {total}")));
        }
        Ok(())
    }
}

/// Grid centres (multiples of `step` in x and y) at which `template`,
/// moved there, lies inside the sensing disk. Ordered by y, then x.
pub fn enumerate_positions(template: &Phantom, step: f64) -> Vec<Point2> {
    assert!(step > 0.0, "step must be positive");
    let k = (FIELD_RADIUS_MM / step).floor() as i64;
    let mut out = Vec::new();
    for iy in -k..=k {
        for ix in -k..=k {
            let c = Point2::new(ix as f64 * step, iy as f64 * step);
            let mut p = *template;
            p.center = c;
            if p.fits_in_field() {
                out.push(c);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub object: usize,
    /// Position index, unique across objects.
    pub position: usize,
    pub repetition: usize,
    pub phantom: Phantom,
    /// Noisy differential frame.
    pub frame: ComplexFrame,
    pub label: TriVector,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub name: String,
    pub positions: usize,
    pub samples: usize,
    pub first_sample: usize,
    pub first_position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub data_file: String,
    pub sha256: String,
    pub total_samples: usize,
    pub config: DatasetConfig,
    pub objects: Vec<ObjectSummary>,
    pub splits: Splits,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub objects: Vec<ObjectSummary>,
    pub samples: Vec<Sample>,
    pub splits: Splits,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn round_frame(f: &ComplexFrame) -> ComplexFrame {
    ComplexFrame::from_fn(|e, s| {
        let z = f.get(e, s);
        Complex64::new(round_f32(z.re), round_f32(z.im))
    })
}

fn round_phantom(p: &Phantom) -> Phantom {
    Phantom {
        size: round_f32(p.size),
        conductivity: round_f32(p.conductivity),
        center: Point2::new(round_f32(p.center.x), round_f32(p.center.y)),
        orientation: round_f32(p.orientation),
        ..*p
    }
}

/// Builds every sample in memory. Values are rounded to `f32` so that a
/// save/load cycle is exact.
pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mesh = build_mesh();
    let model = FemModel::new();
    let background = config.background();
    let clean_bg = model.forward(&background)?;

    let mut jobs = Vec::new();
    let mut objects = Vec::new();
    let (mut next_sample, mut next_position) = (0, 0);
    for (oi, spec) in config.objects.iter().enumerate() {
        let positions = enumerate_positions(&spec.phantom_at(Point2::default()), spec.step_mm);
        objects.push(ObjectSummary {
            name: spec.name.clone(),
            positions: positions.len(),
            samples: positions.len() * spec.repetitions,
            first_sample: next_sample,
            first_position: next_position,
        });
        for c in positions {
            jobs.push((oi, next_position, next_sample, spec.phantom_at(c)));
            next_position += 1;
            next_sample += spec.repetitions;
        }
    }

    let noise = NoiseModel {
        snr_db: config.snr_db,
        seed: config.seed,
    };
    let per_position = parallel::map_slice(&jobs, |&(object, position, first_id, phantom)| {
        sweep_position(
            &model,
            &mesh,
            config,
            &background,
            &clean_bg,
            &noise,
            object,
            position,
            first_id,
            &phantom,
        )
    });
    let mut samples = Vec::with_capacity(next_sample);
    for s in per_position {
        samples.extend(s?);
    }
    let splits = split(&objects, config.split, config.seed)?;
    Ok(Dataset {
        config: config.clone(),
        objects,
        samples,
        splits,
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep_position(
    model: &FemModel,
    mesh: &TriMesh,
    config: &DatasetConfig,
    background: &MaterialMap,
    clean_bg: &ComplexFrame,
    noise: &NoiseModel,
    object: usize,
    position: usize,
    first_id: usize,
    phantom: &Phantom,
) -> Result<Vec<Sample>> {
    let sigma = conductivity_map(std::slice::from_ref(phantom), mesh, config.background_sigma)?;
    let absolute = model.forward(&background.with_sigma(&sigma))?;
    let mut diff = absolute.sub(clean_bg);
    diff.zero_diagonal();
    let label = rasterize_phantom_to_tri(phantom, mesh)?;
    (0..config.objects[object].repetitions)
        .map(|rep| {
            let id = first_id + rep;
            let mut r = rng::stream(noise.seed, "sample-noise", id as u64);
            let noisy = add_noise_with(&diff, &absolute, noise, &mut r)?;
            Ok(Sample {
                id,
                object,
                position,
                repetition: rep,
                phantom: round_phantom(phantom),
                frame: round_frame(&noisy),
                label: label.clone(),
            })
        })
        .collect()
}

/// Splits positions of every object by `ratios`; all repetitions of a
/// position land in the same split. Returns sample ids.
pub fn split(objects: &[ObjectSummary], ratios: [f64; 3], seed: u64) -> Result<Splits> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let mut splits = Splits::default();
    for (oi, o) in objects.iter().enumerate() {
        let mut order: Vec<usize> = (0..o.positions).collect();
        order.shuffle(&mut rng::stream(seed, "split", oi as u64));
        let n_train = (ratios[0] * o.positions as f64).round() as usize;
        let n_val = ((ratios[1] * o.positions as f64).round() as usize).min(o.positions - n_train);
        let reps = if o.positions == 0 { 0 } else { o.samples / o.positions };
        for (k, &p) in order.iter().enumerate() {
            let dst = if k < n_train {
                &mut splits.train
            } else if k < n_train + n_val {
                &mut splits.val
            } else {
                &mut splits.test
            };
            dst.extend((0..reps).map(|r| o.first_sample + p * reps + r));
        }
    }
    for (name, s, r) in [
        ("train", &mut splits.train, ratios[0]),
        ("validation", &mut splits.val, ratios[1]),
        ("test", &mut splits.test, ratios[2]),
    ] {
        if s.is_empty() && r > 0.0 {
            return Err(Error::InvalidArgument(format!("{name} split is empty")));
        }
        s.sort_unstable();
    }
    Ok(splits)
}

/// 16×32 real layout: row `e` holds the 16 real parts then the 16
/// imaginary parts of excitation `e`.
pub fn flatten(frame: &ComplexFrame) -> Vec<Vec<f64>> {
    (0..16)
        .map(|e| {
            let mut row: Vec<f64> = (0..16).map(|s| frame.get(e, s).re).collect();
            row.extend((0..16).map(|s| frame.get(e, s).im));
            row
        })
        .collect()
}

pub fn unflatten(m: &[Vec<f64>]) -> Result<ComplexFrame> {
    if m.len() != 16 || m.iter().any(|r| r.len() != 32) {
        let cols = m.first().map_or(0, Vec::len);
        return Err(Error::shape("16×32", format!("{}×{}", m.len(), cols)));
    }
    Ok(ComplexFrame::from_fn(|e, s| Complex64::new(m[e][s], m[e][16 + s])))
}

/// Real plane then imaginary plane, each 16×16 row-major.
pub fn frame_planes(frame: &ComplexFrame) -> Vec<f64> {
    let mut v: Vec<f64> = frame.as_slice().iter().map(|z| z.re).collect();
    v.extend(frame.as_slice().iter().map(|z| z.im));
    v
}

pub fn frame_from_planes(v: &[f64]) -> Result<ComplexFrame> {
    if v.len() != 512 {
        return Err(Error::shape(512, v.len()));
    }
    Ok(ComplexFrame::from_fn(|e, s| {
        Complex64::new(v[e * 16 + s], v[256 + e * 16 + s])
    }))
}

fn encode_samples(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + samples.len() * RECORD_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for s in samples {
        let p = &s.phantom;
        out.push(p.shape.id());
        for v in [p.size, p.conductivity, p.center.x, p.center.y, p.orientation] {
            put(&mut out, v);
        }
        for v in frame_planes(&s.frame) {
            put(&mut out, v);
        }
        for &v in s.label.as_slice() {
            put(&mut out, v);
        }
    }
    out
}

struct Record {
    phantom: Phantom,
    frame: ComplexFrame,
    label: TriVector,
}

fn decode_samples(bytes: &[u8]) -> std::result::Result<Vec<Record>, String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("missing MITD magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let count = word(8) as usize;
    if bytes.len() != 12 + count * RECORD_BYTES {
        return Err(format!(
            "expected {} bytes for {count} samples, found {}",
            12 + count * RECORD_BYTES,
            bytes.len()
        ));
    }
    let mut out = Vec::with_capacity(count);
    for rec in bytes[12..].chunks_exact(RECORD_BYTES) {
        let f = |k: usize| f32::from_le_bytes(rec[1 + 4 * k..5 + 4 * k].try_into().unwrap()) as f64;
        let shape = PhantomShape::from_id(rec[0]).ok_or_else(|| format!("unknown shape id {}", rec[0]))?;
        let phantom = Phantom {
            shape,
            size: f(0),
            conductivity: f(1),
            center: Point2::new(f(2), f(3)),
            orientation: f(4),
        };
        let frame = frame_from_planes(&(5..517).map(f).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let label = TriVector::new((517..1029).map(f).collect()).map_err(|e| e.to_string())?;
        out.push(Record { phantom, frame, label });
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    pub fn manifest(&self, data_bytes: &[u8]) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            data_file: DATA_FILE.into(),
            sha256: sha256_hex(data_bytes),
            total_samples: self.samples.len(),
            config: self.config.clone(),
            objects: self.objects.clone(),
            splits: self.splits.clone(),
        }
    }

    /// Writes `samples.mitd` and `manifest.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = encode_samples(&self.samples);
        let data_path = dir.join(DATA_FILE);
        fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
        let manifest = self.manifest(&bytes);
        let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let man_path = dir.join(MANIFEST_FILE);
        fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
            path: man_path.clone(),
            detail: e.to_string(),
        })?;
        let data_path: PathBuf = dir.join(&manifest.data_file);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let fmt_err = |detail: String| Error::Format {
            path: data_path.clone(),
            detail,
        };
        if sha256_hex(&bytes) != manifest.sha256 {
            return Err(fmt_err("checksum does not match the manifest".into()));
        }
        let records = decode_samples(&bytes).map_err(fmt_err)?;
        if records.len() != manifest.total_samples {
            return Err(fmt_err(format!(
                "manifest lists {} samples, file has {}",
                manifest.total_samples,
                records.len()
            )));
        }
        let mut samples = Vec::with_capacity(records.len());
        for (oi, o) in manifest.objects.iter().enumerate() {
            let reps = if o.positions == 0 { 0 } else { o.samples / o.positions };
            for k in 0..o.samples {
                let id = o.first_sample + k;
                let rec = records.get(id).ok_or_else(|| fmt_err(format!("sample {id} missing")))?;
                samples.push(Sample {
                    id,
                    object: oi,
                    position: o.first_position + k / reps,
                    repetition: k % reps,
                    phantom: rec.phantom,
                    frame: rec.frame.clone(),
                    label: rec.label.clone(),
                });
            }
        }
        Ok(Self {
            config: manifest.config,
            objects: manifest.objects,
            samples,
            splits: manifest.splits,
        })
    }

    pub fn split_samples(&self, ids: &[usize]) -> Vec<&Sample> {
        ids.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split_samples(&self.splits.train)
    }

    pub fn val(&self) -> Vec<&Sample> {
        self.split_samples(&self.splits.val)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split_samples(&self.splits.test)
    }
}
