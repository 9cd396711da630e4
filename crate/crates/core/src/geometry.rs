//! Sensing field, coil ring, the 512-triangle mesh, phantoms and the
//! rasterizers that move between phantom geometry, triangle vectors and
//! 256×256 field images.
//!
//! Coordinates are millimetres with the field centre at the origin, `+x` to
//! the right and `+y` up. Image rows run top to bottom.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FIELD_DIAMETER_MM: f64 = 200.0;
pub const FIELD_RADIUS_MM: f64 = FIELD_DIAMETER_MM / 2.0;
pub const COIL_COUNT: usize = 16;
pub const COIL_TURNS: u32 = 13;
pub const COIL_DIAMETER_MM: f64 = 18.0;
pub const TRIANGLE_COUNT: usize = 512;
pub const IMAGE_SIZE: usize = 256;
pub const PIXEL_MM: f64 = FIELD_DIAMETER_MM / IMAGE_SIZE as f64;

/// Node counts of the concentric rings, innermost first. A fan of 32
/// triangles fills the centre; every annulus between rings of 32 and 64
/// nodes holds 96 triangles, giving 32 + 5·96 = 512.
const RING_NODES: [usize; 6] = [16, 32, 48, 64, 64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingField {
    pub diameter: f64,
    pub center: Point2,
}

impl Default for SensingField {
    fn default() -> Self {
        Self {
            diameter: FIELD_DIAMETER_MM,
            center: Point2::default(),
        }
    }
}

impl SensingField {
    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.dist(self.center) <= self.radius()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoilArray {
    pub angles: Vec<f64>,
    pub radius: f64,
    pub coil_diameter: f64,
    pub turns: u32,
}

impl CoilArray {
    pub fn count(&self) -> usize {
        self.angles.len()
    }

    pub fn position(&self, k: usize) -> Point2 {
        let (s, c) = self.angles[k].sin_cos();
        Point2::new(self.radius * c, self.radius * s)
    }

    /// Length of wire in one coil, in metres (turns × circumference).
    pub fn effective_loop_length_m(&self) -> f64 {
        self.turns as f64 * PI * self.coil_diameter * 1e-3
    }
}

pub fn build_coil_array() -> CoilArray {
    CoilArray {
        angles: (0..COIL_COUNT)
            .map(|k| 2.0 * PI * k as f64 / COIL_COUNT as f64)
            .collect(),
        radius: FIELD_RADIUS_MM,
        coil_diameter: COIL_DIAMETER_MM,
        turns: COIL_TURNS,
    }
}

/// Triangulated disk. The first [`TRIANGLE_COUNT`] triangles always form the
/// reconstruction mesh; the FEM variant appends exterior air rings after them.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub nodes: Vec<Point2>,
    pub triangles: Vec<[usize; 3]>,
    /// Edge-sharing neighbours of each triangle, sorted ascending.
    pub adjacency: Vec<Vec<usize>>,
    /// Start index of each node ring in `nodes` (ring 0 is the centre node).
    pub ring_offsets: Vec<usize>,
    pixel_map: OnceLock<Vec<Option<u32>>>,
}

fn polygon_area(n: usize, r: f64) -> f64 {
    0.5 * n as f64 * r * r * (2.0 * PI / n as f64).sin()
}

/// Ring radii giving near-equal triangle areas inside the 64-gon of radius
/// [`FIELD_RADIUS_MM`].
fn ring_radii() -> Vec<f64> {
    let total = polygon_area(64, FIELD_RADIUS_MM);
    let per_tri = total / TRIANGLE_COUNT as f64;
    let mut inside = 0usize;
    RING_NODES
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            inside += if k == 0 { n } else { RING_NODES[k - 1] + n };
            let target = inside as f64 * per_tri;
            (2.0 * target / (n as f64 * (2.0 * PI / n as f64).sin())).sqrt()
        })
        .collect()
}

impl TriMesh {
    fn from_rings(radii: &[f64], counts: &[usize]) -> Self {
        let mut nodes = vec![Point2::default()];
        let mut ring_offsets = vec![0];
        for (&r, &n) in radii.iter().zip(counts) {
            ring_offsets.push(nodes.len());
            for k in 0..n {
                let a = 2.0 * PI * k as f64 / n as f64;
                nodes.push(Point2::new(r * a.cos(), r * a.sin()));
            }
        }

        let mut triangles = Vec::new();
        let first = ring_offsets[1];
        let n0 = counts[0];
        for k in 0..n0 {
            triangles.push([0, first + k, first + (k + 1) % n0]);
        }
        for ring in 1..counts.len() {
            let (ni, no) = (counts[ring - 1], counts[ring]);
            let inner = |k: usize| ring_offsets[ring] + k % ni;
            let outer = |k: usize| ring_offsets[ring + 1] + k % no;
            // walk both rings by angle, emitting a triangle per advanced vertex
            let (mut i, mut j) = (0, 0);
            while i < ni || j < no {
                let ai = (i + 1) as f64 / ni as f64;
                let ao = (j + 1) as f64 / no as f64;
                if j < no && (i >= ni || ao <= ai + 1e-12) {
                    triangles.push([inner(i), outer(j), outer(j + 1)]);
                    j += 1;
                } else {
                    triangles.push([inner(i), outer(j), inner(i + 1)]);
                    i += 1;
                }
            }
        }

        for t in &mut triangles {
            let [a, b, c] = *t;
            if signed_area(nodes[a], nodes[b], nodes[c]) < 0.0 {
                t.swap(1, 2);
            }
        }

        let adjacency = edge_adjacency(&triangles);
        TriMesh {
            nodes,
            triangles,
            adjacency,
            ring_offsets,
            pixel_map: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn vertices(&self, t: usize) -> [Point2; 3] {
        self.triangles[t].map(|i| self.nodes[i])
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.vertices(t);
        signed_area(a, b, c)
    }

    pub fn centroid(&self, t: usize) -> Point2 {
        let [a, b, c] = self.vertices(t);
        Point2::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.len()).map(|t| self.area(t)).sum()
    }

    /// Lowest-index triangle containing `p` (edges inclusive).
    pub fn locate(&self, p: Point2) -> Option<usize> {
        (0..self.len()).find(|&t| {
            let [a, b, c] = self.vertices(t);
            point_in_triangle(p, a, b, c)
        })
    }

    /// Index of the node closest to `p` (lowest index on ties).
    pub fn nearest_node(&self, p: Point2) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = n.dist(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Triangle permutation induced by rotating the mesh by `steps·2π/16`:
    /// triangle `t` maps onto triangle `perm[t]`. Found geometrically by
    /// matching rotated centroids.
    pub fn rotation_permutation(&self, steps: i32) -> Vec<usize> {
        let angle = 2.0 * PI * steps as f64 / COIL_COUNT as f64;
        let centroids: Vec<Point2> = (0..self.len()).map(|t| self.centroid(t)).collect();
        centroids
            .iter()
            .map(|c| {
                let r = c.rotate(angle);
                let (mut best, mut bi) = (f64::INFINITY, 0);
                for (j, o) in centroids.iter().enumerate() {
                    let d = o.dist(r);
                    if d < best {
                        best = d;
                        bi = j;
                    }
                }
                debug_assert!(best < 1e-6, "mesh is not rotationally symmetric");
                bi
            })
            .collect()
    }

    /// Node permutation for the same rotation.
    pub fn node_rotation_permutation(&self, steps: i32) -> Vec<usize> {
        let angle = 2.0 * PI * steps as f64 / COIL_COUNT as f64;
        self.nodes.iter().map(|p| self.nearest_node(p.rotate(angle))).collect()
    }

    /// For every pixel of a [`FieldImage`], the triangle that contains its
    /// centre, or `None` outside the sensing disk. Pixels inside the disk
    /// but outside the 64-gon snap to the triangle with the nearest centroid.
    pub fn pixel_map(&self) -> &[Option<u32>] {
        self.pixel_map.get_or_init(|| {
            let n = TRIANGLE_COUNT.min(self.len());
            let boxes: Vec<[f64; 4]> = (0..n)
                .map(|t| {
                    let v = self.vertices(t);
                    [
                        v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
                        v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
                        v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
                        v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
                    ]
                })
                .collect();
            let centroids: Vec<Point2> = (0..n).map(|t| self.centroid(t)).collect();
            let mut map = vec![None; IMAGE_SIZE * IMAGE_SIZE];
            for (idx, slot) in map.iter_mut().enumerate() {
                let p = pixel_center(idx / IMAGE_SIZE, idx % IMAGE_SIZE);
                if p.norm() > FIELD_RADIUS_MM {
                    continue;
                }
                let hit = (0..n).find(|&t| {
                    let b = boxes[t];
                    const PAD: f64 = 1e-9;
                    p.x >= b[0] - PAD && p.x <= b[1] + PAD && p.y >= b[2] - PAD && p.y <= b[3] + PAD && {
                        let [a, bb, c] = self.vertices(t);
                        point_in_triangle(p, a, bb, c)
                    }
                });
                let t = hit.unwrap_or_else(|| {
                    let mut best = (f64::INFINITY, 0);
                    for (t, c) in centroids.iter().enumerate() {
                        let d = c.dist(p);
                        if d < best.0 {
                            best = (d, t);
                        }
                    }
                    best.1
                });
                *slot = Some(t as u32);
            }
            map
        })
    }

    /// Plain-text export: one `x y` line per node, then one `i j k` line per
    /// triangle (zero-based).
    pub fn write_text(&self, mut w: impl Write) -> std::io::Result<()> {
        for n in &self.nodes {
            writeln!(w, "{} {}", n.x, n.y)?;
        }
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_text(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }
}

/// The canonical 512-triangle mesh of the sensing disk.
pub fn build_mesh() -> TriMesh {
    TriMesh::from_rings(&ring_radii(), &RING_NODES)
}

/// The reconstruction mesh extended by air rings of 64 nodes at the given
/// radii (mm, increasing, all beyond the coil circle). Triangles
/// `0..TRIANGLE_COUNT` and the disk nodes keep their canonical order.
pub fn build_extended_mesh(exterior_radii: &[f64]) -> TriMesh {
    let mut radii = ring_radii();
    let mut counts = RING_NODES.to_vec();
    for &r in exterior_radii {
        assert!(r > *radii.last().unwrap(), "exterior radii must increase");
        radii.push(r);
        counts.push(64);
    }
    TriMesh::from_rings(&radii, &counts)
}

fn signed_area(a: Point2, b: Point2, c: Point2) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

fn point_in_triangle(p: Point2, a: Point2, b: Point2, c: Point2) -> bool {
    const EPS: f64 = 1e-9;
    let d1 = signed_area(p, a, b);
    let d2 = signed_area(p, b, c);
    let d3 = signed_area(p, c, a);
    d1 >= -EPS && d2 >= -EPS && d3 >= -EPS
}

fn edge_adjacency(triangles: &[[usize; 3]]) -> Vec<Vec<usize>> {
    use std::collections::HashMap;
    let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            edges.entry((a.min(b), a.max(b))).or_default().push(t);
        }
    }
    let mut adj = vec![Vec::new(); triangles.len()];
    for owners in edges.values() {
        debug_assert!(owners.len() <= 2);
        if let [a, b] = owners[..] {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    adj
}

/// Centre of pixel `(row, col)` in field coordinates.
pub fn pixel_center(row: usize, col: usize) -> Point2 {
    Point2::new(
        (col as f64 + 0.5) * PIXEL_MM - FIELD_RADIUS_MM,
        FIELD_RADIUS_MM - (row as f64 + 0.5) * PIXEL_MM,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomShape {
    Cylinder,
    TriangularPrism,
}

impl PhantomShape {
    pub fn id(self) -> u8 {
        match self {
            PhantomShape::Cylinder => 0,
            PhantomShape::TriangularPrism => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(PhantomShape::Cylinder),
            1 => Some(PhantomShape::TriangularPrism),
            _ => None,
        }
    }
}

/// A uniform-conductivity object, modelled by its 2D cross-section.
///
/// `size` is the diameter for cylinders and the side length for prisms.
/// A prism at orientation 0 has one vertex pointing towards `+y`; its
/// `center` is the triangle centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub shape: PhantomShape,
    pub size: f64,
    pub conductivity: f64,
    pub center: Point2,
    pub orientation: f64,
}

impl Phantom {
    pub fn cylinder(diameter: f64, conductivity: f64, center: Point2) -> Self {
        Self {
            shape: PhantomShape::Cylinder,
            size: diameter,
            conductivity,
            center,
            orientation: 0.0,
        }
    }

    pub fn prism(side: f64, conductivity: f64, center: Point2, orientation: f64) -> Self {
        Self {
            shape: PhantomShape::TriangularPrism,
            size: side,
            conductivity,
            center,
            orientation,
        }
    }

    pub fn prism_vertices(&self) -> [Point2; 3] {
        let r = self.size / 3f64.sqrt();
        std::array::from_fn(|k| {
            let a = PI / 2.0 + self.orientation + 2.0 * PI * k as f64 / 3.0;
            Point2::new(self.center.x + r * a.cos(), self.center.y + r * a.sin())
        })
    }

    /// Strict interior test; a zero-size phantom contains nothing.
    pub fn contains(&self, p: Point2) -> bool {
        match self.shape {
            PhantomShape::Cylinder => {
                let r = self.size / 2.0;
                let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
                dx * dx + dy * dy < r * r
            }
            PhantomShape::TriangularPrism => {
                let [a, b, c] = self.prism_vertices();
                signed_area(p, a, b) > 0.0 && signed_area(p, b, c) > 0.0 && signed_area(p, c, a) > 0.0
            }
        }
    }

    /// Largest distance of the cross-section from the field centre.
    pub fn outer_extent(&self) -> f64 {
        match self.shape {
            PhantomShape::Cylinder => self.center.norm() + self.size / 2.0,
            PhantomShape::TriangularPrism => self.prism_vertices().iter().map(|v| v.norm()).fold(0.0, f64::max),
        }
    }

    pub fn fits_in_field(&self) -> bool {
        self.outer_extent() <= FIELD_RADIUS_MM + 1e-9
    }

    pub fn cross_section_area(&self) -> f64 {
        match self.shape {
            PhantomShape::Cylinder => PI * self.size * self.size / 4.0,
            PhantomShape::TriangularPrism => 3f64.sqrt() / 4.0 * self.size * self.size,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.conductivity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "phantom conductivity must be positive, got {}",
                self.conductivity
            )));
        }
        if !self.fits_in_field() {
            return Err(Error::PhantomOutsideField(format!(
                "{:?} of size {} mm at ({:.2}, {:.2}) reaches {:.2} mm",
                self.shape,
                self.size,
                self.center.x,
                self.center.y,
                self.outer_extent()
            )));
        }
        Ok(())
    }
}

/// One value per mesh triangle, in mesh order.
#[derive(Debug, Clone, PartialEq)]
pub struct TriVector(Vec<f64>);

impl TriVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != TRIANGLE_COUNT {
            return Err(Error::shape(TRIANGLE_COUNT, values.len()));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; TRIANGLE_COUNT])
    }

    pub fn filled(v: f64) -> Self {
        Self(vec![v; TRIANGLE_COUNT])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Applies a triangle permutation: output `perm[t]` takes input `t`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = vec![0.0; TRIANGLE_COUNT];
        for (t, &p) in perm.iter().enumerate().take(TRIANGLE_COUNT) {
            out[p] = self.0[t];
        }
        Self(out)
    }
}

impl std::ops::Index<usize> for TriVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Binary occupancy label: triangle `t` is 1 iff its centroid lies inside
/// the phantom cross-section.
pub fn rasterize_phantom_to_tri(phantom: &Phantom, mesh: &TriMesh) -> Result<TriVector> {
    phantom.check()?;
    Ok(TriVector(
        (0..TRIANGLE_COUNT)
            .map(|t| f64::from(u8::from(phantom.contains(mesh.centroid(t)))))
            .collect(),
    ))
}

/// Per-triangle conductivity: `background` everywhere except triangles whose
/// centroid lies in one of the phantoms.
pub fn conductivity_map(phantoms: &[Phantom], mesh: &TriMesh, background: f64) -> Result<TriVector> {
    for p in phantoms {
        p.check()?;
    }
    Ok(TriVector(
        (0..TRIANGLE_COUNT)
            .map(|t| {
                let c = mesh.centroid(t);
                phantoms
                    .iter()
                    .rev()
                    .find(|p| p.contains(c))
                    .map_or(background, |p| p.conductivity)
            })
            .collect(),
    ))
}

/// 256×256 conductivity image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldImage {
    pixels: Vec<f64>,
}

impl Default for FieldImage {
    fn default() -> Self {
        Self::zeros()
    }
}

impl FieldImage {
    pub const SCALE_MM: f64 = PIXEL_MM;

    pub fn zeros() -> Self {
        Self {
            pixels: vec![0.0; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    pub fn from_pixels(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != IMAGE_SIZE * IMAGE_SIZE {
            return Err(Error::shape(IMAGE_SIZE * IMAGE_SIZE, pixels.len()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * IMAGE_SIZE + col]
    }

    /// Zeroes everything outside the sensing disk and clamps to `[0, 1]`.
    pub fn masked_to_disk(mut self) -> Self {
        for (i, v) in self.pixels.iter_mut().enumerate() {
            if pixel_center(i / IMAGE_SIZE, i % IMAGE_SIZE).norm() > FIELD_RADIUS_MM {
                *v = 0.0;
            } else {
                *v = v.clamp(0.0, 1.0);
            }
        }
        self
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.pixels.iter().filter(|&&v| v >= threshold).count()
    }
}

/// Binary image of the phantom: pixel is 1 iff its centre is inside.
pub fn rasterize_phantom_to_image(phantom: &Phantom) -> Result<FieldImage> {
    phantom.check()?;
    let pixels = (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|i| {
            let p = pixel_center(i / IMAGE_SIZE, i % IMAGE_SIZE);
            f64::from(u8::from(p.norm() <= FIELD_RADIUS_MM && phantom.contains(p)))
        })
        .collect();
    Ok(FieldImage { pixels })
}

/// Fills each pixel with the value of the triangle containing its centre.
pub fn tri_vector_to_image(v: &TriVector, mesh: &TriMesh) -> FieldImage {
    let pixels = mesh
        .pixel_map()
        .iter()
        .map(|t| t.map_or(0.0, |t| v[t as usize]))
        .collect();
    FieldImage { pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_has_512_triangles_and_disk_area() {
        let m = build_mesh();
        assert_eq!(m.len(), TRIANGLE_COUNT);
        let disk = PI * FIELD_RADIUS_MM * FIELD_RADIUS_MM;
        let rel = (m.total_area() - disk).abs() / disk;
        assert!(rel < 0.02, "area deviation {rel}");
        assert!((0..m.len()).all(|t| m.area(t) > 0.0));
    }

    #[test]
    fn triangle_areas_are_near_equal() {
        let m = build_mesh();
        let mean = m.total_area() / 512.0;
        for t in 0..m.len() {
            let r = m.area(t) / mean;
            assert!((0.5..2.0).contains(&r), "triangle {t} area ratio {r}");
        }
    }

    #[test]
    fn interior_edges_shared_by_two() {
        let m = build_mesh();
        let boundary: usize = m.adjacency.iter().map(|a| 3 - a.len()).sum();
        // 64 boundary edges on the outer ring
        assert_eq!(boundary, 64);
        for (t, a) in m.adjacency.iter().enumerate() {
            for &n in a {
                assert!(m.adjacency[n].contains(&t));
            }
        }
    }

    #[test]
    fn rotation_maps_mesh_onto_itself() {
        let m = build_mesh();
        let perm = m.node_rotation_permutation(1);
        let angle = 2.0 * PI / 16.0;
        for (i, &j) in perm.iter().enumerate() {
            assert!(m.nodes[i].rotate(angle).dist(m.nodes[j]) < 1e-9);
        }
        let mut tri_set: Vec<[usize; 3]> = m
            .triangles
            .iter()
            .map(|t| {
                let mut s = [t[0], t[1], t[2]];
                s.sort_unstable();
                s
            })
            .collect();
        tri_set.sort_unstable();
        let mut rotated: Vec<[usize; 3]> = m
            .triangles
            .iter()
            .map(|t| {
                let mut s = t.map(|i| perm[i]);
                s.sort_unstable();
                s
            })
            .collect();
        rotated.sort_unstable();
        assert_eq!(tri_set, rotated);
    }

    #[test]
    fn rotation_permutation_has_order_16() {
        let m = build_mesh();
        let p = m.rotation_permutation(1);
        let mut acc: Vec<usize> = (0..m.len()).collect();
        for k in 1..=16 {
            acc = acc.iter().map(|&i| p[i]).collect();
            let identity = acc.iter().enumerate().all(|(i, &j)| i == j);
            assert_eq!(identity, k == 16, "power {k}");
        }
    }

    #[test]
    fn coil_layout() {
        let c = build_coil_array();
        assert_eq!(c.count(), 16);
        assert_eq!(c.angles[0], 0.0);
        assert!((c.angles[4] - PI / 2.0).abs() < 1e-15);
        for k in 0..16 {
            assert!((c.position(k).norm() - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coils_sit_on_mesh_nodes() {
        let m = build_mesh();
        let c = build_coil_array();
        for k in 0..16 {
            let p = c.position(k);
            assert!(m.nodes[m.nearest_node(p)].dist(p) < 1e-9);
        }
    }

    #[test]
    fn centered_cylinder_label_count_matches_brute_force() {
        let m = build_mesh();
        let ph = Phantom::cylinder(30.0, 2.0, Point2::default());
        let v = rasterize_phantom_to_tri(&ph, &m).unwrap();
        let brute = (0..512)
            .filter(|&t| {
                let [a, b, c] = m.triangles[t].map(|i| m.nodes[i]);
                let cx = (a.x + b.x + c.x) / 3.0;
                let cy = (a.y + b.y + c.y) / 3.0;
                cx * cx + cy * cy < 15.0 * 15.0
            })
            .count();
        assert_eq!(v.sum() as usize, brute);
        assert!((8..=16).contains(&brute), "{brute} triangles");
    }

    #[test]
    fn phantom_outside_field_rejected() {
        let m = build_mesh();
        let ph = Phantom::cylinder(30.0, 2.0, Point2::new(90.0, 0.0));
        assert!(matches!(
            rasterize_phantom_to_tri(&ph, &m),
            Err(Error::PhantomOutsideField(_))
        ));
        assert!(rasterize_phantom_to_image(&ph).is_err());
    }

    #[test]
    fn tiny_phantom_between_centroids_is_empty() {
        let m = build_mesh();
        let ph = Phantom::cylinder(0.5, 2.0, m.nodes[40]);
        assert_eq!(rasterize_phantom_to_tri(&ph, &m).unwrap().sum(), 0.0);
    }

    #[test]
    fn rotated_phantom_label_is_permutation() {
        let m = build_mesh();
        let perm = m.rotation_permutation(1);
        let ph = Phantom::cylinder(35.0, 3.0, Point2::new(37.0, -21.0));
        let mut rot = ph;
        rot.center = ph.center.rotate(2.0 * PI / 16.0);
        let a = rasterize_phantom_to_tri(&ph, &m).unwrap();
        let b = rasterize_phantom_to_tri(&rot, &m).unwrap();
        assert_eq!(a.permuted(&perm), b);
    }

    #[test]
    fn image_cylinder_area() {
        let ph = Phantom::cylinder(30.0, 2.0, Point2::default());
        let img = rasterize_phantom_to_image(&ph).unwrap();
        let expected = PI * (15.0 / PIXEL_MM).powi(2);
        let got = img.count_above(0.5) as f64;
        assert!((got - expected).abs() / expected < 0.01, "{got} vs {expected}");
    }

    #[test]
    fn image_prism_area() {
        let expected = 3f64.sqrt() / 4.0 * 40.0 * 40.0 / (PIXEL_MM * PIXEL_MM);
        let offsets: Vec<f64> = (0..10).map(|k| k as f64 * 0.077).collect();
        let mean = offsets
            .iter()
            .map(|&d| {
                let ph = Phantom::prism(40.0, 2.0, Point2::new(3.0 + d, 5.0 + d), 0.0);
                rasterize_phantom_to_image(&ph).unwrap().count_above(0.5) as f64
            })
            .sum::<f64>()
            / offsets.len() as f64;
        assert!((mean - expected).abs() / expected < 0.01, "{mean} vs {expected}");
    }

    #[test]
    fn prism_points_up_at_zero_orientation() {
        let ph = Phantom::prism(40.0, 2.0, Point2::default(), 0.0);
        let v = ph.prism_vertices();
        assert!(v[0].x.abs() < 1e-12 && v[0].y > 0.0);
    }

    #[test]
    fn degenerate_phantom_image_is_empty() {
        let ph = Phantom::cylinder(0.0, 2.0, Point2::default());
        assert_eq!(rasterize_phantom_to_image(&ph).unwrap().count_above(0.5), 0);
        let pr = Phantom::prism(0.0, 2.0, Point2::default(), 0.3);
        assert_eq!(rasterize_phantom_to_image(&pr).unwrap().count_above(0.5), 0);
    }

    #[test]
    fn tri_rendering_of_constants() {
        let m = build_mesh();
        let ones = tri_vector_to_image(&TriVector::filled(1.0), &m);
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                let inside = pixel_center(r, c).norm() <= FIELD_RADIUS_MM;
                assert_eq!(ones.get(r, c), f64::from(u8::from(inside)));
            }
        }
        let zeros = tri_vector_to_image(&TriVector::zeros(), &m);
        assert!(zeros.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_map_ties_go_to_lowest_index() {
        let m = build_mesh();
        let map = m.pixel_map();
        for (i, t) in map.iter().enumerate() {
            let p = pixel_center(i / IMAGE_SIZE, i % IMAGE_SIZE);
            if let (Some(t), Some(l)) = (t, m.locate(p)) {
                assert_eq!(*t as usize, l);
            }
        }
    }

    #[test]
    fn mesh_text_export() {
        let m = build_mesh();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), m.nodes.len() + 512);
        assert_eq!(lines[m.nodes.len()].split(' ').count(), 3);
    }

    #[test]
    fn extended_mesh_keeps_canonical_prefix() {
        let m = build_mesh();
        let e = build_extended_mesh(&[120.0, 150.0]);
        assert_eq!(e.len(), 512 + 2 * 128);
        assert_eq!(&e.triangles[..512], &m.triangles[..]);
        assert_eq!(&e.nodes[..m.nodes.len()], &m.nodes[..]);
    }
}
