use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Spatial extent `(D, H, W)`; storage is row-major with W fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Self { d: n, h: n, w: n }
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        (i / (self.w * self.h), y, x)
    }

    pub fn min_dim(&self) -> usize {
        self.d.min(self.h).min(self.w)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub(crate) fn halved(&self) -> Self {
        Self::new(self.d / 2, self.h / 2, self.w / 2)
    }

    pub(crate) fn doubled(&self) -> Self {
        Self::new(self.d * 2, self.h * 2, self.w * 2)
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Voxel spacing `(sz, sy, sx)`.
pub type Spacing = [f64; 3];

pub const UNIT_SPACING: Spacing = [1.0, 1.0, 1.0];

/// Scalar intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: Spacing,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, voxels: Vec<f32>) -> Result<Self> {
        Self::with_spacing(shape, UNIT_SPACING, voxels)
    }

    pub fn with_spacing(shape: Shape3, spacing: Spacing, voxels: Vec<f32>) -> Result<Self> {
        ensure!(
            voxels.len() == shape.len(),
            "volume of shape {shape} needs {} voxels, got {}",
            shape.len(),
            voxels.len()
        );
        ensure!(
            voxels.iter().all(|v| v.is_finite()),
            "volume contains non-finite intensities"
        );
        ensure!(
            spacing.iter().all(|s| s.is_finite() && *s > 0.0),
            "spacing must be positive, got {spacing:?}"
        );
        Ok(Self {
            shape,
            spacing,
            voxels,
        })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            spacing: UNIT_SPACING,
            voxels: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.shape.index(z, y, x)]
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }
}

/// `{0,1}` grid aligned to a [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    shape: Shape3,
    voxels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: Shape3, voxels: Vec<u8>) -> Result<Self> {
        ensure!(
            voxels.len() == shape.len(),
            "mask of shape {shape} needs {} voxels, got {}",
            shape.len(),
            voxels.len()
        );
        if let Some(i) = voxels.iter().position(|&v| v > 1) {
            return Err(crate::Error::Validation(format!(
                "mask value {} at voxel {i} is not binary",
                voxels[i]
            )));
        }
        Ok(Self { shape, voxels })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            voxels: vec![0; shape.len()],
        }
    }

    pub fn ones(shape: Shape3) -> Self {
        Self {
            shape,
            voxels: vec![1; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(shape.len());
        for z in 0..shape.d {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    voxels.push(u8::from(f(z, y, x)));
                }
            }
        }
        Self { shape, voxels }
    }

    /// Thresholds probabilities: voxel is foreground iff `p > threshold`.
    pub fn threshold(shape: Shape3, probs: &[f32], threshold: f32) -> Self {
        assert_eq!(probs.len(), shape.len());
        Self {
            shape,
            voxels: probs.iter().map(|&p| u8::from(p > threshold)).collect(),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.voxels[self.shape.index(z, y, x)] == 1
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.shape.len() as f64
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        ensure!(
            self.shape == other.shape,
            "mask shapes differ: {} vs {}",
            self.shape,
            other.shape
        );
        Ok(Self {
            shape: self.shape,
            voxels: self
                .voxels
                .iter()
                .zip(&other.voxels)
                .map(|(a, b)| a & b)
                .collect(),
        })
    }

    pub fn complement(&self) -> BinaryMask {
        Self {
            shape: self.shape,
            voxels: self.voxels.iter().map(|v| 1 - v).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let s = Shape3::new(3, 4, 5);
        for i in 0..s.len() {
            let (z, y, x) = s.coords(i);
            assert_eq!(s.index(z, y, x), i);
        }
    }

    #[test]
    fn rejects_invalid() {
        let s = Shape3::cube(2);
        assert!(Volume::new(s, vec![0.0; 7]).is_err());
        assert!(Volume::new(s, vec![f32::NAN; 8]).is_err());
        assert!(BinaryMask::new(s, vec![2; 8]).is_err());
        assert!(BinaryMask::new(s, vec![1; 8]).is_ok());
    }
}
