//! Dense scalar 3-D grids: scans, heatmaps and masks.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("volume extents must be >= 1, got {0:?}")]
    ZeroExtent([usize; 3]),
    #[error("voxel spacing must be > 0, got {0:?}")]
    BadSpacing([f32; 3]),
    #[error("volume {extents:?} needs {expected} values, got {got}")]
    LengthMismatch {
        extents: [usize; 3],
        expected: usize,
        got: usize,
    },
}

/// A `(D, H, W)` grid of `f32` values in row-major order with per-axis voxel
/// spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if extents.contains(&0) {
            return Err(VolumeError::ZeroExtent(extents));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        let expected = extents.iter().product();
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                extents,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            extents,
            spacing,
            data,
        })
    }

    /// Unit-spacing volume.
    pub fn from_data(extents: [usize; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        Self::new(extents, [1.0; 3], data)
    }

    pub fn filled(extents: [usize; 3], value: f32) -> Result<Self, VolumeError> {
        let n = extents.iter().product();
        Self::from_data(extents, vec![value; n])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self, VolumeError> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Same extents and spacing, new values.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            extents: self.extents,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// A `[1, 1, D, H, W]` tensor view of the values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.extents;
        Tensor::from_vec(&[1, 1, d, h, w], self.data.clone()).expect("extents are positive")
    }
}
