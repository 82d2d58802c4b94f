use crate::volume::Volume;

/// Source coordinate of target index `i` when `n_out` samples span the same
/// corner-to-corner extent as `n_in` samples.
#[inline]
fn corner_aligned(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 || n_in == 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Trilinear interpolation of `v` at a continuous voxel coordinate
/// `(z, y, x)`. Neighbours outside the grid read zero.
pub(crate) fn sample_trilinear(v: &Volume, z: f64, y: f64, x: f64) -> f64 {
    let [d, h, w] = v.extents();
    let (z0, y0, x0) = (z.floor(), y.floor(), x.floor());
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let (z0, y0, x0) = (z0 as i64, y0 as i64, x0 as i64);
    let read = |zi: i64, yi: i64, xi: i64| -> f64 {
        if zi < 0 || yi < 0 || xi < 0 || zi >= d as i64 || yi >= h as i64 || xi >= w as i64 {
            0.0
        } else {
            v.get(zi as usize, yi as usize, xi as usize) as f64
        }
    };
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * read(z0 + dz, y0 + dy, x0 + dx);
            }
        }
    }
    acc
}

/// Resamples `v` onto a grid of `target` extents with corner-aligned
/// trilinear interpolation. Spacing is rescaled so the physical extent is kept.
pub fn trilinear_resample(v: &Volume, target: [usize; 3]) -> Volume {
    let target = target.map(|e| e.max(1));
    let src = v.extents();
    if src == target {
        return v.clone();
    }
    let coords: [Vec<f64>; 3] =
        std::array::from_fn(|a| (0..target[a]).map(|i| corner_aligned(i, src[a], target[a])).collect());
    let mut out = Vec::with_capacity(target.iter().product());
    for &z in &coords[0] {
        for &y in &coords[1] {
            for &x in &coords[2] {
                out.push(sample_trilinear(v, z, y, x) as f32);
            }
        }
    }
    let spacing = std::array::from_fn(|a| {
        if target[a] > 1 && src[a] > 1 {
            v.spacing()[a] * (src[a] - 1) as f32 / (target[a] - 1) as f32
        } else {
            v.spacing()[a] * src[a] as f32 / target[a] as f32
        }
    });
    Volume::new(target, spacing, out).expect("target extents are positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_extents_is_identity() {
        let v = Volume::from_data([2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(trilinear_resample(&v, [2, 2, 3]), v);
    }

    #[test]
    fn constant_stays_constant() {
        let v = Volume::filled([3, 4, 5], 2.5).unwrap();
        let up = trilinear_resample(&v, [7, 9, 11]);
        assert!(up.data().iter().all(|&x| (x - 2.5).abs() < 1e-6));
    }

    #[test]
    fn two_point_profile_to_three_points() {
        let v = Volume::from_data([1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = trilinear_resample(&v, [1, 1, 3]);
        assert_eq!(up.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn single_voxel_broadcasts() {
        let v = Volume::from_data([1, 1, 1], vec![4.0]).unwrap();
        let up = trilinear_resample(&v, [2, 3, 2]);
        assert!(up.data().iter().all(|&x| x == 4.0));
    }
}
