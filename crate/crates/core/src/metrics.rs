//! Evaluation metrics on binarized images and triangle smoothing.

use crate::error::{Error, Result};
use crate::geometry::{tri_vector_to_image, FieldImage, TriMesh, TriVector, IMAGE_SIZE};

/// Binary pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(width * height, bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Pixels with value `≥ threshold` are set.
    pub fn from_image(img: &FieldImage, threshold: f64) -> Self {
        Self {
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            bits: img.pixels().iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn same_shape(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(
                format!("{}×{}", self.width, self.height),
                format!("{}×{}", other.width, other.height),
            ));
        }
        Ok(())
    }
}

/// Intersection over union in percent; two empty masks score 100.
pub fn iou(r: &Mask, g: &Mask) -> Result<f64> {
    r.same_shape(g)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in r.bits.iter().zip(&g.bits) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 {
        100.0
    } else {
        100.0 * inter as f64 / union as f64
    })
}

/// Mass centre in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
}

pub fn centroid(m: &Mask) -> Result<Centroid> {
    let (mut sx, mut sy, mut k) = (0.0, 0.0, 0usize);
    for (i, &b) in m.bits.iter().enumerate() {
        if b {
            sx += (i % m.width) as f64;
            sy += (i / m.width) as f64;
            k += 1;
        }
    }
    if k == 0 {
        return Err(Error::EmptyMask("centroid"));
    }
    Ok(Centroid {
        x: sx / k as f64,
        y: sy / k as f64,
    })
}

/// Centroid distance in pixels.
pub fn cd(r: &Mask, g: &Mask) -> Result<f64> {
    r.same_shape(g)?;
    let (a, b) = (centroid(r)?, centroid(g)?);
    Ok((a.x - b.x).hypot(a.y - b.y))
}

/// One simultaneous pass of averaging each triangle with its edge neighbours.
pub fn smooth_tri(v: &TriVector, mesh: &TriMesh) -> TriVector {
    let out = mesh
        .adjacency
        .iter()
        .enumerate()
        .map(|(i, nb)| (v[i] + nb.iter().map(|&j| v[j]).sum::<f64>()) / (1 + nb.len()) as f64)
        .collect();
    TriVector::new(out).expect("mesh has 512 triangles")
}

/// Default binarization threshold.
pub const THRESHOLD: f64 = 0.5;

/// IoU (percent) and centroid distance (pixels) of one reconstruction.
/// `cd` is `None` when the binarized reconstruction is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub iou: f64,
    pub cd: Option<f64>,
}

/// Binarizes `image` and scores it against `truth`.
pub fn score_image(image: &FieldImage, truth: &Mask, threshold: f64) -> Score {
    let m = Mask::from_image(image, threshold);
    let iou = iou(&m, truth).expect("256×256 masks");
    let cd = cd(&m, truth).ok();
    Score { iou, cd }
}

/// Smoothed 256×256 rendering of a triangle vector.
pub fn render_smoothed(v: &TriVector, mesh: &TriMesh) -> FieldImage {
    tri_vector_to_image(&smooth_tri(v, mesh), mesh)
}

/// smooth → render → binarize → score.
pub fn score_tri(v: &TriVector, mesh: &TriMesh, truth: &Mask, threshold: f64) -> Score {
    score_image(&render_smoothed(v, mesh), truth, threshold)
}

/// Triangle-level IoU (percent) of binarized `pred` against a binary label.
pub fn tri_iou(pred: &TriVector, label: &TriVector, threshold: f64) -> f64 {
    let bits = |v: &TriVector, t: f64| v.as_slice().iter().map(|&x| x >= t).collect::<Vec<_>>();
    let n = pred.as_slice().len();
    let a = Mask::new(n, 1, bits(pred, threshold)).expect("length");
    let b = Mask::new(n, 1, bits(label, 0.5)).expect("length");
    iou(&a, &b).expect("same length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_mesh;

    fn square(size: usize, x0: usize, y0: usize, side: usize) -> Mask {
        let mut m = Mask::empty(size, size);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn iou_cases() {
        let a = square(32, 2, 2, 10);
        assert_eq!(iou(&a, &a).unwrap(), 100.0);
        assert_eq!(iou(&a, &square(32, 20, 20, 5)).unwrap(), 0.0);
        let shifted = iou(&a, &square(32, 7, 2, 10)).unwrap();
        assert!((shifted - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&Mask::empty(4, 4), &Mask::empty(4, 4)).unwrap(), 100.0);
        assert!(iou(&a, &Mask::empty(4, 4)).is_err());
    }

    #[test]
    fn centroid_cases() {
        let mut m = Mask::empty(16, 16);
        m.set(7, 3, true);
        assert_eq!(centroid(&m).unwrap(), Centroid { x: 7.0, y: 3.0 });
        let mut two = Mask::empty(16, 16);
        two.set(0, 0, true);
        two.set(10, 0, true);
        assert_eq!(centroid(&two).unwrap(), Centroid { x: 5.0, y: 0.0 });
        assert!(matches!(centroid(&Mask::empty(3, 3)), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn cd_cases() {
        let a = square(40, 5, 5, 8);
        assert_eq!(cd(&a, &a).unwrap(), 0.0);
        assert!((cd(&a, &square(40, 8, 9, 8)).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_cases() {
        let m = build_mesh();
        let c = smooth_tri(&TriVector::filled(0.7), &m);
        assert!(c.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let mut v = TriVector::zeros();
        v.as_mut_slice()[100] = 1.0;
        let s = smooth_tri(&v, &m);
        assert_eq!(s[100], 1.0 / (1 + m.adjacency[100].len()) as f64);
        for &j in &m.adjacency[100] {
            assert_eq!(s[j], 1.0 / (1 + m.adjacency[j].len()) as f64);
        }
        let touched = 1 + m.adjacency[100].len();
        assert_eq!(s.as_slice().iter().filter(|&&x| x > 0.0).count(), touched);
    }
}
