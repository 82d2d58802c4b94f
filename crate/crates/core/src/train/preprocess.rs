//! Intensity normalization and rotation augmentation.

use rand::Rng;

use super::TrainError;
use crate::tensor::resample::sample_trilinear;
use crate::volume::Volume;

/// `(v − mean) / std` over all voxels with the population standard deviation.
pub fn zscore_normalize(v: &Volume) -> Result<Volume, TrainError> {
    if v.len() < 2 {
        return Err(TrainError::DegenerateVolume(format!("{} voxel(s)", v.len())));
    }
    let n = v.len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(TrainError::DegenerateVolume(format!("standard deviation is {std}")));
    }
    Ok(v.map(|x| ((x as f64 - mean) / std) as f32))
}

/// A canonical axis of a `(D, H, W)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    D,
    H,
    W,
}

type Mat3 = [[f64; 3]; 3];

fn axis_rotation(axis: Axis, deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    // Coordinates are (z, y, x); each rotation acts in the plane of the other two axes.
    match axis {
        Axis::D => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        Axis::H => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        Axis::W => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Applies the rotations in sequence (first element first) about the grid
/// centre, sampling trilinearly with zero fill outside the source.
pub fn rotate(v: &Volume, rotations: &[(Axis, f64)]) -> Volume {
    if rotations.iter().all(|&(_, a)| a == 0.0) {
        return v.clone();
    }
    let mut r: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for &(axis, deg) in rotations {
        r = matmul(&axis_rotation(axis, deg), &r);
    }
    // Source point = Rᵀ (p − c) + c.
    let [d, h, w] = v.extents();
    let c = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let q = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                let src: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| r[k][i] * q[k]).sum::<f64>() + c[i]);
                out.push(sample_trilinear(v, src[0], src[1], src[2]) as f32);
            }
        }
    }
    Volume::new(v.extents(), v.spacing(), out).expect("same grid")
}

/// Angles drawn uniformly in `[−max_deg, max_deg]` for D, H and W (in that
/// order), applied in that order.
pub fn sample_rotation_angles<R: Rng + ?Sized>(rng: &mut R, max_deg: f64) -> [(Axis, f64); 3] {
    let mut draw = || if max_deg > 0.0 { rng.random_range(-max_deg..=max_deg) } else { 0.0 };
    let a = draw();
    let b = draw();
    let c = draw();
    [(Axis::D, a), (Axis::H, b), (Axis::W, c)]
}

pub fn random_rotation<R: Rng + ?Sized>(v: &Volume, rng: &mut R, max_deg: f64) -> Volume {
    rotate(v, &sample_rotation_angles(rng, max_deg))
}
