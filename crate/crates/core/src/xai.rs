//! Layer Grad-CAM heatmaps and the Heat-Score localization metric.

use thiserror::Error;

use crate::resnet::{ForwardOptions, Model, ModelError, Stage};
use crate::tensor::{trilinear_resample, Tape, Tensor, TensorError};
use crate::volume::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum XaiError {
    #[error("class index {0} is out of range for a two-class model")]
    BadClass(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} region is empty")]
    EmptyRegion(&'static str),
    #[error("background standard deviation is zero")]
    DegenerateBackground,
    #[error("mask values must be 0 or 1, found {0}")]
    NotBinary(f32),
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for XaiError {
    fn from(e: TensorError) -> Self {
        XaiError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, XaiError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Volume,
    pub normalized: bool,
    /// The map was constant before normalization and was set to zero.
    pub degenerate_constant: bool,
}

impl Heatmap {
    /// Wraps values that are already in their final form.
    pub fn from_values(values: Volume, normalized: bool) -> Self {
        Self {
            values,
            normalized,
            degenerate_constant: false,
        }
    }
}

/// A binary lesion segmentation with at least one voxel inside.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMask {
    mask: Volume,
    count: usize,
}

impl LesionMask {
    pub fn new(mask: Volume) -> Result<Self> {
        let mut count = 0;
        for &v in mask.data() {
            if v == 1.0 {
                count += 1;
            } else if v != 0.0 {
                return Err(XaiError::NotBinary(v));
            }
        }
        if count == 0 {
            return Err(XaiError::EmptyRegion("lesion"));
        }
        Ok(Self { mask, count })
    }

    pub fn volume(&self) -> &Volume {
        &self.mask
    }

    pub fn voxel_count(&self) -> usize {
        self.count
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask.data()[i] == 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatScoreResult {
    pub hs: f64,
    pub mean_in: f64,
    pub mean_bkg: f64,
    pub std_bkg: f64,
    pub n_in: usize,
    pub n_bkg: usize,
}

/// Class-activation map of one Grad-CAM pass before upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivation {
    /// Per-channel weights: the spatial mean of the logit gradient.
    pub alphas: Vec<f64>,
    /// `ReLU(Σ_k α_k A_k)` on the layer grid.
    pub map: Volume,
}

/// Combines a `[1, C, d, h, w]` activation with its gradient.
pub fn class_activation_from(activation: &Tensor<f32>, grad: &[f64]) -> Result<ClassActivation> {
    let [n, c, d, h, w] = activation.dims5()?;
    if n != 1 || grad.len() != activation.numel() {
        return Err(XaiError::ShapeMismatch(format!(
            "activation {:?} with {} gradient values",
            activation.shape(),
            grad.len()
        )));
    }
    let sp = d * h * w;
    let alphas: Vec<f64> = grad.chunks_exact(sp).map(|g| g.iter().sum::<f64>() / sp as f64).collect();
    let mut acc = vec![0f64; sp];
    for (k, a) in alphas.iter().enumerate() {
        for (o, &x) in acc.iter_mut().zip(&activation.data()[k * sp..(k + 1) * sp]) {
            *o += a * x as f64;
        }
    }
    debug_assert_eq!(alphas.len(), c);
    let map = Volume::from_data([d, h, w], acc.into_iter().map(|v| v.max(0.0) as f32).collect())
        .expect("layer extents are positive");
    Ok(ClassActivation { alphas, map })
}

/// Runs the model on a single scan (`[1, 1, D, H, W]`) with batch-norm in
/// inference mode and differentiates the `target_class` logit with respect
/// to the output of `layer`.
pub fn class_activation(model: &Model, x: &Tensor<f32>, target_class: usize, layer: Stage) -> Result<ClassActivation> {
    if target_class >= model.spec().num_classes {
        return Err(XaiError::BadClass(target_class));
    }
    let [n, ..] = x.dims5()?;
    if n != 1 {
        return Err(XaiError::ShapeMismatch(format!("Grad-CAM takes one scan, got batch {n}")));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let pass = model.record(
        &mut tape,
        xv,
        ForwardOptions {
            train: false,
            capture: Some(layer),
            params_as_constants: true,
            ..Default::default()
        },
    )?;
    let score = tape.pick(pass.logits, target_class)?;
    let grads = tape.gradients(score)?;
    let captured = pass.captured.expect("capture requested");
    class_activation_from(tape.value(captured), grads.wrt(captured)?)
}

/// The Grad-CAM map upsampled to the scan grid, before normalization.
pub fn grad_cam_raw(model: &Model, x: &Tensor<f32>, target_class: usize, layer: Stage) -> Result<Volume> {
    let [_, _, d, h, w] = x.dims5()?;
    let cam = class_activation(model, x, target_class, layer)?;
    Ok(trilinear_resample(&cam.map, [d, h, w]).with_spacing([1.0; 3]).expect("unit spacing"))
}

/// Min-max normalized Grad-CAM heatmap on the scan grid.
pub fn grad_cam(model: &Model, x: &Tensor<f32>, target_class: usize, layer: Stage) -> Result<Heatmap> {
    Ok(min_max_normalize(&grad_cam_raw(model, x, target_class, layer)?))
}

/// `(v − min) / (max − min)`; a constant volume maps to zeros and is flagged.
pub fn min_max_normalize(v: &Volume) -> Heatmap {
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x as f64), hi.max(x as f64))
        });
    if !(hi > lo) {
        return Heatmap {
            values: v.map(|_| 0.0),
            normalized: true,
            degenerate_constant: true,
        };
    }
    let range = hi - lo;
    Heatmap {
        values: v.map(|x| (((x as f64 - lo) / range) as f32).clamp(0.0, 1.0)),
        normalized: true,
        degenerate_constant: false,
    }
}

/// `HS = (V_S − V_Bkg) / σ_Bkg` with the population standard deviation.
///
/// The background is every non-lesion voxel, restricted to `domain`
/// (non-zero voxels) when given. The score is unchanged by any increasing
/// affine rescaling of the heatmap.
pub fn heat_score(h: &Heatmap, lesion: &LesionMask, domain: Option<&Volume>) -> Result<HeatScoreResult> {
    let ext = h.values.extents();
    if lesion.volume().extents() != ext {
        return Err(XaiError::ShapeMismatch(format!(
            "heatmap {ext:?} vs lesion mask {:?}",
            lesion.volume().extents()
        )));
    }
    if let Some(dm) = domain {
        if dm.extents() != ext {
            return Err(XaiError::ShapeMismatch(format!(
                "heatmap {ext:?} vs domain mask {:?}",
                dm.extents()
            )));
        }
    }
    let in_bkg = |i: usize| !lesion.contains(i) && domain.is_none_or(|d| d.data()[i] != 0.0);
    let vals = h.values.data();
    let (mut sum_in, mut n_in, mut sum_bkg, mut n_bkg) = (0f64, 0usize, 0f64, 0usize);
    for (i, &v) in vals.iter().enumerate() {
        if lesion.contains(i) {
            sum_in += v as f64;
            n_in += 1;
        } else if in_bkg(i) {
            sum_bkg += v as f64;
            n_bkg += 1;
        }
    }
    if n_in == 0 {
        return Err(XaiError::EmptyRegion("lesion"));
    }
    if n_bkg < 2 {
        return Err(XaiError::EmptyRegion("background"));
    }
    let mean_in = sum_in / n_in as f64;
    let mean_bkg = sum_bkg / n_bkg as f64;
    let ss: f64 = vals
        .iter()
        .enumerate()
        .filter(|&(i, _)| in_bkg(i))
        .map(|(_, &v)| (v as f64 - mean_bkg).powi(2))
        .sum();
    let std_bkg = (ss / n_bkg as f64).sqrt();
    if std_bkg == 0.0 {
        return Err(XaiError::DegenerateBackground);
    }
    Ok(HeatScoreResult {
        hs: (mean_in - mean_bkg) / std_bkg,
        mean_in,
        mean_bkg,
        std_bkg,
        n_in,
        n_bkg,
    })
}

/// Mean Heat-Score over scans.
pub fn heat_score_aggregate(results: &[HeatScoreResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(XaiError::EmptyInput);
    }
    Ok(results.iter().map(|r| r.hs).sum::<f64>() / results.len() as f64)
}

pub fn format_heat_score(hs: f64) -> String {
    format!("Heat-Score: {hs:.3}")
}

/// Binary PGM (P5) of the middle axial slice (`z = D/2`), values in `[0, 1]`
/// mapped to 0..=255. Lesion voxels of that slice with a 4-neighbour outside
/// the lesion (or on the slice border) are drawn at 0.
pub fn mid_axial_pgm(h: &Heatmap, lesion: Option<&LesionMask>) -> Result<Vec<u8>> {
    let [d, hh, w] = h.values.extents();
    if let Some(l) = lesion {
        if l.volume().extents() != [d, hh, w] {
            return Err(XaiError::ShapeMismatch(format!(
                "heatmap {:?} vs lesion mask {:?}",
                [d, hh, w],
                l.volume().extents()
            )));
        }
    }
    let z = d / 2;
    let mut out = format!("P5\n{w} {hh}\n255\n").into_bytes();
    for y in 0..hh {
        for x in 0..w {
            let v = h.values.get(z, y, x);
            let px = if v.is_nan() { 0 } else { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
            let on_contour = lesion.is_some_and(|l| {
                let m = l.volume();
                let inside = |yy: usize, xx: usize| m.get(z, yy, xx) == 1.0;
                inside(y, x)
                    && (y == 0
                        || x == 0
                        || y + 1 == hh
                        || x + 1 == w
                        || !inside(y - 1, x)
                        || !inside(y + 1, x)
                        || !inside(y, x - 1)
                        || !inside(y, x + 1))
            });
            out.push(if on_contour { 0 } else { px });
        }
    }
    Ok(out)
}
