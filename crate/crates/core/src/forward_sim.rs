//! Linear-triangle FEM for the 2D eddy-current problem
//!
//! ```text
//!   -∇·(μ⁻¹ ∇A) + jωσ A = J₀
//! ```
//!
//! on the reconstruction mesh extended by air rings, with `A = 0` on the
//! outermost ring. Each coil is a point source/sensor at its mesh node; the
//! coil winding (turns × circumference) enters only as a scalar on the
//! sensed voltage `U = -jω·A·L`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    build_coil_array, build_extended_mesh, CoilArray, Point2, TriMesh, TriVector, COIL_COUNT, TRIANGLE_COUNT,
};
use crate::parallel;
use crate::{Error, Result};

pub const MU_0: f64 = 4.0e-7 * PI;
pub const DEFAULT_FREQUENCY_HZ: f64 = 1.0e6;
pub const DEFAULT_BACKGROUND_SIGMA: f64 = 0.1;
pub const DEFAULT_SNR_DB: f64 = 62.0;

/// Air rings (mm) appended outside the coil circle; the last one carries
/// the homogeneous Dirichlet condition.
pub const EXTERIOR_RADII_MM: [f64; 4] = [115.0, 135.0, 160.0, 200.0];

const J: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialMap {
    /// Conductivity per reconstruction triangle (S/m). Air rings are 0.
    pub sigma: Vec<f64>,
    /// Uniform permeability (H/m).
    pub mu: f64,
    /// Angular excitation frequency (rad/s).
    pub omega: f64,
}

impl MaterialMap {
    pub fn new(sigma: &TriVector, mu: f64, omega: f64) -> Result<Self> {
        let m = Self {
            sigma: sigma.as_slice().to_vec(),
            mu,
            omega,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn uniform(sigma: f64) -> Self {
        Self {
            sigma: vec![sigma; TRIANGLE_COUNT],
            mu: MU_0,
            omega: 2.0 * PI * DEFAULT_FREQUENCY_HZ,
        }
    }

    pub fn with_sigma(&self, sigma: &TriVector) -> Self {
        Self {
            sigma: sigma.as_slice().to_vec(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.len() != TRIANGLE_COUNT {
            return Err(Error::shape(TRIANGLE_COUNT, self.sigma.len()));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("conductivity {s} is not ≥ 0")));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "permeability must be positive, got {}",
                self.mu
            )));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "angular frequency must be positive, got {}",
                self.omega
            )));
        }
        Ok(())
    }

    fn same_configuration(&self, other: &MaterialMap) -> bool {
        self.mu == other.mu && self.omega == other.omega && self.sigma.len() == other.sigma.len()
    }
}

/// 16×16 complex measurement matrix; entry `(e, s)` is the voltage sensed at
/// coil `s` while coil `e` excites.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrame {
    data: Vec<Complex64>,
}

impl Default for ComplexFrame {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ComplexFrame {
    pub const N: usize = COIL_COUNT;

    pub fn zeros() -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); Self::N * Self::N],
        }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut out = Self::zeros();
        for e in 0..Self::N {
            for s in 0..Self::N {
                out.data[e * Self::N + s] = f(e, s);
            }
        }
        out
    }

    pub fn get(&self, e: usize, s: usize) -> Complex64 {
        self.data[e * Self::N + s]
    }

    pub fn set(&mut self, e: usize, s: usize, v: Complex64) {
        self.data[e * Self::N + s] = v;
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn zero_diagonal(&mut self) {
        for k in 0..Self::N {
            self.data[k * Self::N + k] = Complex64::new(0.0, 0.0);
        }
    }

    pub fn sub(&self, other: &ComplexFrame) -> ComplexFrame {
        ComplexFrame {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, c: Complex64) -> ComplexFrame {
        ComplexFrame {
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn transpose(&self) -> ComplexFrame {
        Self::from_fn(|e, s| self.get(s, e))
    }

    /// Relabels coils `k → k + shift (mod 16)` on both axes.
    pub fn cyclic_shift(&self, shift: usize) -> ComplexFrame {
        let n = Self::N;
        let mut out = Self::zeros();
        for e in 0..n {
            for s in 0..n {
                out.set((e + shift) % n, (s + shift) % n, self.get(e, s));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &ComplexFrame) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Off-diagonal entries in row-major order (240 values).
    pub fn off_diagonal(&self) -> impl Iterator<Item = Complex64> + '_ {
        (0..Self::N * Self::N)
            .filter(|i| i / Self::N != i % Self::N)
            .map(|i| self.data[i])
    }
}

/// Banded complex matrix over the free (non-Dirichlet) nodes.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    /// Row `i` stores columns `i - bw ..= i + bw`.
    band: Vec<Complex64>,
}

impl BandMatrix {
    fn new(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![Complex64::new(0.0, 0.0); n * (2 * bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        if i.abs_diff(j) > self.bw {
            Complex64::new(0.0, 0.0)
        } else {
            self.band[self.idx(i, j)]
        }
    }

    fn add(&mut self, i: usize, j: usize, v: Complex64) {
        let k = self.idx(i, j);
        self.band[k] += v;
    }

    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.bw);
                let hi = (i + self.bw).min(self.n - 1);
                (lo..=hi).map(|j| self.band[self.idx(i, j)] * x[j]).sum()
            })
            .collect()
    }

    /// In-place LU without pivoting. The matrix is complex symmetric with a
    /// positive-definite real part, for which elimination without pivoting
    /// is stable.
    fn factor(mut self) -> Result<BandLu> {
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        for k in 0..n {
            let pivot = self.band[k * w + bw];
            if pivot.norm() == 0.0 || !pivot.re.is_finite() {
                return Err(Error::Solver {
                    residual: f64::INFINITY,
                });
            }
            let inv = pivot.inv();
            let end = (k + bw + 1).min(n);
            let (head, tail) = self.band.split_at_mut((k + 1) * w);
            let pivot_row = &head[k * w..];
            for i in k + 1..end {
                let row = &mut tail[(i - k - 1) * w..(i - k) * w];
                let lik = row[k + bw - i] * inv;
                row[k + bw - i] = lik;
                if lik.re == 0.0 && lik.im == 0.0 {
                    continue;
                }
                // columns k+1..end: row i offset j+bw-i, pivot row offset j+bw-k
                let off_i = bw - i;
                let off_k = bw - k;
                for j in k + 1..end {
                    row[j + off_i] -= lik * pivot_row[j + off_k];
                }
            }
        }
        Ok(BandLu { lu: self })
    }
}

#[derive(Debug, Clone)]
struct BandLu {
    lu: BandMatrix,
}

impl BandLu {
    fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let (n, bw) = (self.lu.n, self.lu.bw);
        let w = 2 * bw + 1;
        let a = &self.lu.band;
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = x[i];
            for j in lo..i {
                s -= a[i * w + j + bw - i] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=hi {
                s -= a[i * w + j + bw - i] * x[j];
            }
            x[i] = s / a[i * w + bw];
        }
        x
    }
}

/// Assembled system `S = K + jωM` over the free nodes plus the data needed
/// to excite and sense coils.
#[derive(Debug, Clone)]
pub struct FemSystem {
    pub matrix: BandMatrix,
    /// Free-node index of each coil node.
    pub coil_dofs: Vec<usize>,
    pub omega: f64,
    lu: Option<BandLu>,
}

impl FemSystem {
    /// Excitation vector: unit current injected at the coil node.
    pub fn excitation(&self, coil: usize) -> Vec<Complex64> {
        let mut b = vec![Complex64::new(0.0, 0.0); self.matrix.dim()];
        b[self.coil_dofs[coil]] = Complex64::new(1.0, 0.0);
        b
    }
}

/// Nodal vector potential over the free nodes for one excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    pub values: Vec<Complex64>,
    /// Relative residual ‖S·A − b‖ / ‖b‖.
    pub residual: f64,
}

/// The forward model: extended mesh, coil placement and element matrices.
#[derive(Debug, Clone)]
pub struct FemModel {
    pub mesh: TriMesh,
    pub coils: CoilArray,
    /// Free-node index for each mesh node, `None` on the Dirichlet ring.
    free: Vec<Option<usize>>,
    n_free: usize,
    bandwidth: usize,
    /// Per-element `∫∇φᵢ·∇φⱼ` (dimensionless in 2D).
    stiffness: Vec<[[f64; 3]; 3]>,
    /// Per-element area in m².
    area_m2: Vec<f64>,
    coil_nodes: Vec<usize>,
}

impl Default for FemModel {
    fn default() -> Self {
        Self::new()
    }
}

impl FemModel {
    pub fn new() -> Self {
        let mesh = build_extended_mesh(&EXTERIOR_RADII_MM);
        let coils = build_coil_array();
        let outer = *mesh.ring_offsets.last().expect("rings");
        let mut free = vec![None; mesh.nodes.len()];
        let mut n_free = 0;
        for (i, f) in free.iter_mut().enumerate().take(outer) {
            *f = Some(i);
            n_free += 1;
        }
        let mut bandwidth = 0;
        let mut stiffness = Vec::with_capacity(mesh.len());
        let mut area_m2 = Vec::with_capacity(mesh.len());
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let [p0, p1, p2] = mesh.vertices(t);
            let area = mesh.area(t);
            // gradients of barycentric basis functions (mm⁻¹); ∫∇φᵢ·∇φⱼ is scale-free
            let b = [p1.y - p2.y, p2.y - p0.y, p0.y - p1.y];
            let c = [p2.x - p1.x, p0.x - p2.x, p1.x - p0.x];
            let mut k = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    k[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
                }
            }
            stiffness.push(k);
            area_m2.push(area * 1e-6);
            for &a in tri {
                for &bn in tri {
                    if let (Some(i), Some(j)) = (free[a], free[bn]) {
                        bandwidth = bandwidth.max(i.abs_diff(j));
                    }
                }
            }
        }
        let coil_nodes = (0..coils.count())
            .map(|k| mesh.nearest_node(coils.position(k)))
            .collect();
        Self {
            mesh,
            coils,
            free,
            n_free,
            bandwidth,
            stiffness,
            area_m2,
            coil_nodes,
        }
    }

    pub fn free_node_count(&self) -> usize {
        self.n_free
    }

    pub fn coil_nodes(&self) -> &[usize] {
        &self.coil_nodes
    }

    /// Position of free node `i`.
    pub fn free_node_position(&self, i: usize) -> Point2 {
        self.mesh.nodes[i]
    }

    /// Assembles `K + jωM` with `K = ∫ μ⁻¹ ∇φᵢ·∇φⱼ` and `M = ∫ σ φᵢ φⱼ`.
    pub fn assemble(&self, mat: &MaterialMap) -> Result<FemSystem> {
        mat.validate()?;
        let inv_mu = 1.0 / mat.mu;
        let mut a = BandMatrix::new(self.n_free, self.bandwidth);
        for (t, tri) in self.mesh.triangles.iter().enumerate() {
            let sigma = mat.sigma.get(t).copied().unwrap_or(0.0);
            let m_scale = mat.omega * sigma * self.area_m2[t] / 12.0;
            for (li, &ni) in tri.iter().enumerate() {
                let Some(i) = self.free[ni] else { continue };
                for (lj, &nj) in tri.iter().enumerate() {
                    let Some(j) = self.free[nj] else { continue };
                    let mass = if li == lj { 2.0 } else { 1.0 };
                    a.add(i, j, Complex64::new(inv_mu * self.stiffness[t][li][lj], m_scale * mass));
                }
            }
        }
        let coil_dofs = self
            .coil_nodes
            .iter()
            .map(|&n| self.free[n].expect("coil nodes are free"))
            .collect();
        Ok(FemSystem {
            matrix: a,
            coil_dofs,
            omega: mat.omega,
            lu: None,
        })
    }

    /// Factors the system once; later solves reuse the factors.
    pub fn factor(&self, mut sys: FemSystem) -> Result<FemSystem> {
        if sys.lu.is_none() {
            sys.lu = Some(sys.matrix.clone().factor()?);
        }
        Ok(sys)
    }

    /// Solves `S·A = b_coil` for one excitation.
    pub fn solve_excitation(&self, sys: &FemSystem, coil: usize) -> Result<NodalField> {
        if coil >= sys.coil_dofs.len() {
            return Err(Error::InvalidArgument(format!("coil index {coil} out of range")));
        }
        let owned;
        let lu = match &sys.lu {
            Some(lu) => lu,
            None => {
                owned = sys.matrix.clone().factor()?;
                &owned
            }
        };
        let b = sys.excitation(coil);
        let x = lu.solve(&b);
        let r = sys.matrix.mul_vec(&x);
        let num: f64 = r.iter().zip(&b).map(|(r, b)| (r - b).norm_sqr()).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let residual = num / den;
        if !(residual <= 1e-8) {
            return Err(Error::Solver { residual });
        }
        Ok(NodalField { values: x, residual })
    }

    /// Voltages at all coils: `U_s = -jω · A(node_s) · L`.
    pub fn sense(&self, field: &NodalField, omega: f64, excited: Option<usize>) -> Vec<Complex64> {
        let scale = -J * omega * self.coils.effective_loop_length_m();
        self.coil_nodes
            .iter()
            .enumerate()
            .map(|(s, &n)| {
                if Some(s) == excited {
                    Complex64::new(0.0, 0.0)
                } else {
                    scale * field.values[self.free[n].expect("coil node is free")]
                }
            })
            .collect()
    }

    /// Full measurement frame: every coil excites in turn while the others sense.
    pub fn forward(&self, mat: &MaterialMap) -> Result<ComplexFrame> {
        let sys = self.factor(self.assemble(mat)?)?;
        let rows = parallel::map_range(COIL_COUNT, |e| {
            self.solve_excitation(&sys, e)
                .map(|a| self.sense(&a, mat.omega, Some(e)))
        });
        let mut frame = ComplexFrame::zeros();
        for (e, row) in rows.into_iter().enumerate() {
            for (s, v) in row?.into_iter().enumerate() {
                frame.set(e, s, v);
            }
        }
        Ok(frame)
    }

    /// `forward(mat) − forward(background)` with zeroed self-channels.
    pub fn differential_frame(&self, mat: &MaterialMap, background: &MaterialMap) -> Result<ComplexFrame> {
        if !mat.same_configuration(background) {
            return Err(Error::InvalidArgument(
                "object and background use different frequency, permeability or mesh".into(),
            ));
        }
        let f = self.forward(mat)?;
        let b = self.forward(background)?;
        Ok(f.sub(&b))
    }
}

/// Noise applied to measurement frames.
///
/// Each entry receives independent Gaussian noise on its real and
/// imaginary parts with standard deviation `|ref| · 10^(-snr/20)`, where
/// `ref` is the matching entry of the reference (absolute) frame. Repeated
/// draws of an absolute measurement therefore reach the target SNR on every
/// channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Target SNR in dB; `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            snr_db: DEFAULT_SNR_DB,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn disabled() -> Self {
        Self {
            snr_db: f64::INFINITY,
            seed: 0,
        }
    }

    pub fn relative_std(&self) -> f64 {
        10f64.powf(-self.snr_db / 20.0)
    }
}

/// Adds noise scaled by `reference` to `frame`, using `rng` for the draws.
pub fn add_noise_with(
    frame: &ComplexFrame,
    reference: &ComplexFrame,
    model: &NoiseModel,
    rng: &mut impl rand::Rng,
) -> Result<ComplexFrame> {
    if model.snr_db.is_nan() || model.snr_db <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "SNR target must be positive, got {}",
            model.snr_db
        )));
    }
    if model.snr_db == f64::INFINITY {
        return Ok(frame.clone());
    }
    let rel = model.relative_std();
    let mut out = frame.clone();
    for e in 0..ComplexFrame::N {
        for s in 0..ComplexFrame::N {
            if e == s {
                continue;
            }
            let sd = reference.get(e, s).norm() * rel;
            let nr: f64 = rng.sample(StandardNormal);
            let ni: f64 = rng.sample(StandardNormal);
            out.set(e, s, frame.get(e, s) + Complex64::new(sd * nr, sd * ni));
        }
    }
    Ok(out)
}

/// Adds noise with a fresh stream seeded from `model.seed`.
pub fn add_noise(frame: &ComplexFrame, reference: &ComplexFrame, model: &NoiseModel) -> Result<ComplexFrame> {
    let mut rng = crate::rng::stream(model.seed, "frame-noise", 0);
    add_noise_with(frame, reference, model, &mut rng)
}

/// `10·log₁₀(m²/v)` of repeated measurements of one channel.
///
/// Returns `-∞` for a zero mean and [`Error::UnmeasurableSnr`] when the
/// samples do not vary.
pub fn compute_snr(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("SNR needs at least two samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    snr_from_moments(mean, var)
}

pub fn snr_from_moments(mean: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::UnmeasurableSnr);
    }
    if mean == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (mean * mean / variance).log10())
}
