//! Synthetic brain-like volumes with optional focal lesions.
//!
//! A phantom is an ellipsoidal head (half-axes near `0.4·extent`) holding a
//! uniform interior at 1.0 and a brighter cortical shell at 1.1 for
//! normalized radius `ρ ∈ [0.7, 1]`, modulated by a smooth low-frequency
//! field and covered by Gaussian noise. A lesion is an additive Gaussian blob
//! centred in the shell; its mask is the ball where the blob exceeds half of
//! its peak. Everything is a pure function of the `PhantomSpec` and the lesion flag.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::io::{read_manifest, write_manifest, write_nifti, IoError, Manifest, ManifestRow};
use crate::volume::Volume;

pub const INTERIOR_INTENSITY: f32 = 1.0;
pub const SHELL_INTENSITY: f32 = 1.1;
/// Normalized radius where the cortical shell begins.
pub const SHELL_INNER: f64 = 0.7;
/// Peak amplitude of the smooth intensity field.
pub const FIELD_AMPLITUDE: f64 = 0.05;
pub const EASY_CONTRAST: f32 = 0.5;
pub const SUBTLE_CONTRAST: f32 = 0.15;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Cubic grid size.
    pub extent: usize,
    /// Inclusive lesion radius range in voxels.
    pub lesion_radius: (f32, f32),
    /// Additive peak intensity of the lesion blob.
    pub lesion_contrast: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            extent: 64,
            lesion_radius: (3.0, 6.0),
            lesion_contrast: EASY_CONTRAST,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn easy(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn subtle(seed: u64) -> Self {
        Self {
            seed,
            lesion_contrast: SUBTLE_CONTRAST,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.extent < 16 {
            return bad(format!("extent must be >= 16, got {}", self.extent));
        }
        let (lo, hi) = self.lesion_radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("lesion radius range {lo}..={hi} is not a positive interval"));
        }
        // A ball centred on the shell's inner edge must still fit inside the head.
        let shell_depth = (1.0 - SHELL_INNER) * 0.37 * self.extent as f64;
        if hi as f64 + 0.5 > shell_depth {
            return bad(format!(
                "lesion radius {hi} does not fit inside a head of extent {}",
                self.extent
            ));
        }
        if !(self.lesion_contrast >= 0.0 && self.lesion_contrast.is_finite()) {
            return bad(format!("lesion contrast must be >= 0, got {}", self.lesion_contrast));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    /// Binary lesion mask; all zeros for a control.
    pub mask: Volume,
    /// Binary head mask (`ρ ≤ 1`).
    pub head: Volume,
    /// Lesion centre `(z, y, x)` in voxels, for positives.
    pub lesion_center: Option<[f64; 3]>,
    pub lesion_radius: Option<f64>,
}

struct Geometry {
    center: [f64; 3],
    half_axes: [f64; 3],
}

impl Geometry {
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.half_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Generates one phantom. Controls and positives with the same seed share
/// anatomy, field and noise; only the lesion differs.
pub fn generate_phantom(spec: &PhantomSpec, lesion: bool) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let n = spec.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = (n as f64 - 1.0) / 2.0;
    let half_axes: [f64; 3] = std::array::from_fn(|_| n as f64 * rng.random_range(0.37..=0.43));
    let geo = Geometry {
        center: [c; 3],
        half_axes,
    };

    // Three plane waves of one cycle or less across the grid.
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * std::f64::consts::TAU / n as f64);
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let (r_lo, r_hi) = spec.lesion_radius;
    let radius = if r_lo == r_hi {
        r_lo as f64
    } else {
        rng.random_range(r_lo as f64..=r_hi as f64)
    };
    let lesion_center = place_lesion(&geo, radius, &mut rng)?;

    let sigma_blob = radius / (2.0 * std::f64::consts::LN_2).sqrt();
    let noise = Normal::new(0.0, spec.noise_sigma as f64).expect("finite sigma");
    let mut data = Vec::with_capacity(n * n * n);
    let mut mask = Vec::with_capacity(n * n * n);
    let mut head = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                let rho = geo.rho(p);
                let mut v = 0.0;
                if rho <= 1.0 {
                    v = if rho >= SHELL_INNER {
                        SHELL_INTENSITY as f64
                    } else {
                        INTERIOR_INTENSITY as f64
                    };
                    let field: f64 = waves
                        .iter()
                        .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
                        .sum::<f64>()
                        / waves.len() as f64;
                    v += FIELD_AMPLITUDE * field;
                }
                let d2: f64 = (0..3).map(|a| (p[a] - lesion_center[a]).powi(2)).sum();
                let in_lesion = lesion && d2 <= radius * radius;
                if lesion {
                    v += spec.lesion_contrast as f64 * (-d2 / (2.0 * sigma_blob * sigma_blob)).exp();
                }
                // Drawn for every voxel so noise is shared between a control and its positive twin.
                let eps: f64 = noise.sample(&mut rng);
                data.push((v + eps) as f32);
                mask.push(if in_lesion { 1.0 } else { 0.0 });
                head.push(if rho <= 1.0 { 1.0 } else { 0.0 });
            }
        }
    }
    let ext = [n; 3];
    Ok(Phantom {
        volume: Volume::from_data(ext, data).expect("consistent extents"),
        mask: Volume::from_data(ext, mask).expect("consistent extents"),
        head: Volume::from_data(ext, head).expect("consistent extents"),
        lesion_center: lesion.then_some(lesion_center),
        lesion_radius: lesion.then_some(radius),
    })
}

/// A centre on the shell's mid surface whose ball of `radius` stays inside
/// the head.
fn place_lesion(geo: &Geometry, radius: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 3], PhantomError> {
    let shell_mid = (SHELL_INNER + 1.0) / 2.0;
    for _ in 0..1000 {
        let dir: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        // Scale so that the point lies on the ρ = shell_mid surface.
        let scale: f64 = (0..3).map(|a| (dir[a] / norm / geo.half_axes[a]).powi(2)).sum::<f64>().sqrt();
        let mut rho = shell_mid;
        // Move inward until the whole ball fits inside the head.
        while rho >= SHELL_INNER - 1e-9 {
            let center: [f64; 3] = std::array::from_fn(|a| geo.center[a] + dir[a] / norm * rho / scale);
            if ball_inside(geo, center, radius + 0.5) {
                return Ok(center);
            }
            rho -= 0.01;
        }
    }
    Err(PhantomError::InvalidSpec(format!(
        "no lesion placement of radius {radius} fits inside the head"
    )))
}

fn ball_inside(geo: &Geometry, center: [f64; 3], radius: f64) -> bool {
    // Sample the sphere surface densely enough for voxel-scale radii.
    let steps = 24;
    for i in 0..=steps {
        let theta = std::f64::consts::PI * i as f64 / steps as f64;
        for j in 0..(2 * steps) {
            let phi = std::f64::consts::PI * j as f64 / steps as f64;
            let p = [
                center[0] + radius * theta.cos(),
                center[1] + radius * theta.sin() * phi.cos(),
                center[2] + radius * theta.sin() * phi.sin(),
            ];
            if geo.rho(p) > 1.0 {
                return false;
            }
        }
    }
    true
}

/// Writes `n_per_class` positives (with masks) and as many controls to
/// `out_dir`, plus `manifest.csv`. Subject `i` uses seed `spec.seed + i`;
/// positives take indices `0..n`, controls `n..2n`.
pub fn generate_cohort(spec: &PhantomSpec, n_per_class: usize, out_dir: &Path) -> Result<Manifest, PhantomError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| IoError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let subjects: Vec<(usize, bool)> = (0..2 * n_per_class).map(|i| (i, i < n_per_class)).collect();
    let rows: Vec<Result<ManifestRow, PhantomError>> = std::thread::scope(|s| {
        let handles: Vec<_> = subjects
            .chunks(subjects.len().div_ceil(available_threads()).max(1))
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|&(i, positive)| write_subject(spec, i, positive, n_per_class, out_dir))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("phantom worker panicked"))
            .collect()
    });
    let manifest = Manifest {
        rows: rows.into_iter().collect::<Result<_, _>>()?,
    };
    let path = out_dir.join("manifest.csv");
    write_manifest(&manifest, &path)?;
    Ok(read_manifest(&path)?)
}

fn available_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn write_subject(
    spec: &PhantomSpec,
    index: usize,
    positive: bool,
    n_per_class: usize,
    out_dir: &Path,
) -> Result<ManifestRow, PhantomError> {
    let sub = PhantomSpec {
        seed: spec.seed.wrapping_add(index as u64),
        ..spec.clone()
    };
    let ph = generate_phantom(&sub, positive)?;
    let id = if positive {
        format!("pos{index:03}")
    } else {
        format!("ctl{:03}", index - n_per_class)
    };
    let image = format!("{id}.nii");
    write_nifti(&ph.volume, out_dir.join(&image))?;
    let mask = if positive {
        let name = format!("{id}_mask.nii");
        write_nifti(&ph.mask, out_dir.join(&name))?;
        Some(name.into())
    } else {
        None
    };
    Ok(ManifestRow {
        subject_id: id,
        image: image.into(),
        label: u8::from(positive),
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            extent: 32,
            lesion_radius: (2.0, 3.0),
            ..PhantomSpec::easy(seed)
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_phantom(&small(3), true).unwrap();
        let b = generate_phantom(&small(3), true).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&small(4), true).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn control_has_empty_mask_and_shares_anatomy() {
        let ctl = generate_phantom(&small(1), false).unwrap();
        assert!(ctl.mask.data().iter().all(|&v| v == 0.0));
        assert_eq!(ctl.lesion_center, None);
        let pos = generate_phantom(&small(1), true).unwrap();
        let far: Vec<usize> = (0..ctl.volume.len()).filter(|&i| pos.volume.data()[i] == ctl.volume.data()[i]).collect();
        assert!(far.len() > ctl.volume.len() / 2);
    }

    #[test]
    fn invalid_specs() {
        let bad = |s: PhantomSpec| matches!(generate_phantom(&s, true), Err(PhantomError::InvalidSpec(_)));
        assert!(bad(PhantomSpec { extent: 8, ..small(0) }));
        assert!(bad(PhantomSpec { lesion_contrast: -1.0, ..small(0) }));
        assert!(bad(PhantomSpec { lesion_radius: (4.0, 2.0), ..small(0) }));
        assert!(bad(PhantomSpec { lesion_radius: (2.0, 30.0), ..small(0) }));
    }

    #[test]
    fn lesion_is_inside_head_and_brighter() {
        for seed in 0..20 {
            let spec = PhantomSpec::easy(seed);
            let ph = generate_phantom(&spec, true).unwrap();
            let inside: Vec<usize> = (0..ph.mask.len()).filter(|&i| ph.mask.data()[i] == 1.0).collect();
            assert!(!inside.is_empty());
            assert!(inside.iter().all(|&i| ph.head.data()[i] == 1.0), "seed {seed}");
            let mean_in = inside.iter().map(|&i| ph.volume.data()[i] as f64).sum::<f64>() / inside.len() as f64;

            // Control sphere of the same radius on the opposite side of the shell.
            let [cz, cy, cx] = ph.lesion_center.unwrap();
            let c = (spec.extent as f64 - 1.0) / 2.0;
            let mirror = [2.0 * c - cz, 2.0 * c - cy, 2.0 * c - cx];
            let r = ph.lesion_radius.unwrap();
            let n = spec.extent;
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..ph.volume.len() {
                let p = [(i / (n * n)) as f64, ((i / n) % n) as f64, (i % n) as f64];
                let d2: f64 = (0..3).map(|a| (p[a] - mirror[a]).powi(2)).sum();
                if d2 <= r * r {
                    sum += ph.volume.data()[i] as f64;
                    count += 1;
                }
            }
            assert!(mean_in > sum / count as f64, "seed {seed}");
        }
    }

    #[test]
    fn easy_lesions_separate_from_shell() {
        for seed in 0..20 {
            let spec = PhantomSpec::easy(100 + seed);
            let ph = generate_phantom(&spec, true).unwrap();
            let (mut s_in, mut n_in, mut s_shell, mut n_shell) = (0.0, 0, 0.0, 0);
            // Shell membership is recovered from the noise-free twin.
            let ctl = generate_phantom(&PhantomSpec { noise_sigma: 0.0, ..spec.clone() }, false).unwrap();
            for i in 0..ph.volume.len() {
                let v = ph.volume.data()[i] as f64;
                if ph.mask.data()[i] == 1.0 {
                    s_in += v;
                    n_in += 1;
                } else if ctl.volume.data()[i] as f64 > (INTERIOR_INTENSITY as f64) + FIELD_AMPLITUDE {
                    s_shell += v;
                    n_shell += 1;
                }
            }
            let gap = s_in / n_in as f64 - s_shell / n_shell as f64;
            assert!(gap >= 3.0 * spec.noise_sigma as f64, "seed {seed}: gap {gap}");
        }
    }

    #[test]
    fn cohort_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(10);
        let m = generate_cohort(&spec, 5, dir.path()).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.rows.iter().filter(|r| r.mask.is_some()).count(), 5);
        assert_eq!(m.labels().iter().filter(|&&l| l == 1).count(), 5);
        let count = |suffix: &str| {
            fs::read_dir(dir.path())
                .unwrap()
                .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
                .count()
        };
        assert_eq!(count(".nii"), 15);
        assert_eq!(count("_mask.nii"), 5);
        let before = fs::read(dir.path().join("pos002.nii")).unwrap();
        generate_cohort(&spec, 5, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("pos002.nii")).unwrap(), before);
        let vol = crate::io::read_nifti(&m.rows[2].image).unwrap();
        let sub = PhantomSpec { seed: 12, ..spec };
        assert_eq!(vol, generate_phantom(&sub, true).unwrap().volume);
    }
}
