//! Raw forward/backward kernels over flat slices.
//!
//! Layout is always `[N, C, D, H, W]` row-major. Forward outputs are rounded
//! to the element type once, after an `f64` accumulation; backward buffers are
//! `f64` throughout.

use super::{Element, Result, TensorError};

/// Geometry of a 3-D convolution. The weight tensor has shape
/// `(out_channels, in_channels, kD, kH, kW)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvParams {
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [pad; 3],
        }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kd, kh, kw]
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel.iter().chain(&self.stride).any(|&e| e == 0)
        {
            return Err(TensorError::ShapeMismatch(format!(
                "convolution extents must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub(crate) fn output_dims(&self, x: [usize; 5]) -> Result<[usize; 5]> {
        self.validate()?;
        let [n, c, d, h, w] = x;
        if c != self.in_channels {
            return Err(TensorError::ShapeMismatch(format!(
                "conv3d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut out = [n, self.out_channels, 0, 0, 0];
        for (axis, len) in [d, h, w].into_iter().enumerate() {
            out[axis + 2] = conv_output_extent(
                len,
                self.kernel[axis],
                self.stride[axis],
                self.padding[axis],
            )
            .ok_or_else(|| {
                TensorError::ShapeMismatch(format!(
                    "conv3d output extent along axis {axis} is not positive for input {x:?}"
                ))
            })?;
        }
        Ok(out)
    }
}

/// Window geometry of a 3-D max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PoolParams {
    pub fn cubic(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [pad; 3],
        }
    }

    pub(crate) fn output_dims(&self, x: [usize; 5]) -> Result<[usize; 5]> {
        if self.kernel.iter().chain(&self.stride).any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch(format!(
                "pooling extents must be >= 1: {self:?}"
            )));
        }
        // Every window must contain at least one real voxel.
        if (0..3).any(|a| 2 * self.padding[a] > self.kernel[a]) {
            return Err(TensorError::ShapeMismatch(format!(
                "pooling padding must be at most half the kernel: {self:?}"
            )));
        }
        let mut out = x;
        for axis in 0..3 {
            out[axis + 2] = conv_output_extent(
                x[axis + 2],
                self.kernel[axis],
                self.stride[axis],
                self.padding[axis],
            )
            .ok_or_else(|| {
                TensorError::ShapeMismatch(format!(
                    "max-pool output extent along axis {axis} is not positive for input {x:?}"
                ))
            })?;
        }
        Ok(out)
    }
}

/// `floor((len + 2*pad - k) / stride) + 1`, or `None` when that is not positive.
pub fn conv_output_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[inline]
fn offset(o: usize, stride: usize, k: usize, pad: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad)
}

/// Input planes zero-padded in H and W and split by stride phase, so that
/// every kernel tap reads one contiguous run of `o_h * row` values.
///
/// Layout: `[n, c, d, phase_h, phase_w, rows, row]`, where padded position
/// `(i, j)` lives in phase `(i % sh, j % sw)` at `(i / sh, j / sw)`.
struct PhasePlanes {
    data: Vec<f64>,
    sh: usize,
    sw: usize,
    rows: usize,
    row: usize,
}

impl PhasePlanes {
    fn geometry(h: usize, w: usize, p: &ConvParams) -> (usize, usize) {
        let hp = h + 2 * p.padding[1];
        let wp = w + 2 * p.padding[2];
        // One slack row absorbs the column offset of the last tap.
        (hp.div_ceil(p.stride[1]) + 1, wp.div_ceil(p.stride[2]))
    }

    fn plane_len(&self) -> usize {
        self.rows * self.row
    }

    fn depth_slice_len(&self) -> usize {
        self.sh * self.sw * self.plane_len()
    }

    fn zeros(xd: [usize; 5], p: &ConvParams) -> Self {
        let [n, c, d, h, w] = xd;
        let (rows, row) = Self::geometry(h, w, p);
        let (sh, sw) = (p.stride[1], p.stride[2]);
        Self {
            data: vec![0.0; n * c * d * sh * sw * rows * row],
            sh,
            sw,
            rows,
            row,
        }
    }

    fn split<T: Element>(x: &[T], xd: [usize; 5], p: &ConvParams) -> Self {
        let mut planes = Self::zeros(xd, p);
        let [n, c, d, h, w] = xd;
        let (ph, pw) = (p.padding[1], p.padding[2]);
        let dsl = planes.depth_slice_len();
        let pl = planes.plane_len();
        for ncz in 0..n * c * d {
            let src = &x[ncz * h * w..][..h * w];
            let dst = &mut planes.data[ncz * dsl..][..dsl];
            for i in 0..h {
                let pi = i + ph;
                let (rh, qi) = (pi % planes.sh, pi / planes.sh);
                for j in 0..w {
                    let pj = j + pw;
                    let (rw, qj) = (pj % planes.sw, pj / planes.sw);
                    dst[(rh * planes.sw + rw) * pl + qi * planes.row + qj] = src[i * w + j].to_f64();
                }
            }
        }
        planes
    }

    /// Inverse of [`PhasePlanes::split`]; padding positions are dropped.
    fn merge(&self, xd: [usize; 5], p: &ConvParams) -> Vec<f64> {
        let [n, c, d, h, w] = xd;
        let (ph, pw) = (p.padding[1], p.padding[2]);
        let dsl = self.depth_slice_len();
        let pl = self.plane_len();
        let mut out = vec![0.0; n * c * d * h * w];
        for ncz in 0..n * c * d {
            let src = &self.data[ncz * dsl..][..dsl];
            let dst = &mut out[ncz * h * w..][..h * w];
            for i in 0..h {
                let pi = i + ph;
                let (rh, qi) = (pi % self.sh, pi / self.sh);
                for j in 0..w {
                    let pj = j + pw;
                    let (rw, qj) = (pj % self.sw, pj / self.sw);
                    dst[i * w + j] = src[(rh * self.sw + rw) * pl + qi * self.row + qj];
                }
            }
        }
        out
    }

    /// Start of the run read by tap `(kh, kw)` in the depth slice `ncz`.
    #[inline(always)]
    fn tap_offset(&self, ncz: usize, kh: usize, kw: usize) -> usize {
        ncz * self.depth_slice_len()
            + ((kh % self.sh) * self.sw + kw % self.sw) * self.plane_len()
            + (kh / self.sh) * self.row
            + kw / self.sw
    }
}

#[inline(always)]
fn axpy(acc: &mut [f64], xs: &[f64], w: f64) {
    for (a, x) in acc.iter_mut().zip(xs) {
        *a += x * w;
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b[..a.len()].chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            s[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        s[l] += x * y;
    }
    ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]))
}

const TILE: usize = 16;

/// `acc[i] = sum over taps (in order) of data[off + i] * w`, keeping a tile
/// of accumulators in registers across all taps.
#[inline(always)]
fn accumulate_taps(acc: &mut [f64], data: &[f64], taps: &[(usize, f64)]) {
    let run = acc.len();
    let mut c = 0;
    while c + TILE <= run {
        let mut t = [0.0f64; TILE];
        for &(off, w) in taps {
            let xs = &data[off + c..off + c + TILE];
            for l in 0..TILE {
                t[l] += xs[l] * w;
            }
        }
        acc[c..c + TILE].copy_from_slice(&t);
        c += TILE;
    }
    if c < run {
        let rem = run - c;
        let mut t = [0.0f64; TILE];
        for &(off, w) in taps {
            let xs = &data[off + c..off + c + rem];
            for l in 0..rem {
                t[l] += xs[l] * w;
            }
        }
        acc[c..].copy_from_slice(&t[..rem]);
    }
}

/// Compiles `$body` once for AVX2 and once for the baseline target and picks
/// at runtime. Both paths execute the same operations in the same order.
macro_rules! multiversion {
    (fn $name:ident($($arg:ident: $ty:ty),*) -> $ret:ty $body:block) => {
        fn $name<T: Element>($($arg: $ty),*) -> $ret {
            #[inline(always)]
            fn body<T: Element>($($arg: $ty),*) -> $ret $body

            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,avx512f")]
                unsafe fn avx2<T: Element>($($arg: $ty),*) -> $ret {
                    body::<T>($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the CPU supports the enabled feature set.
                    return unsafe { avx2::<T>($($arg),*) };
                }
            }
            body::<T>($($arg),*)
        }
    };
}

/// Cross-correlation with zero padding. For every output voxel the products
/// are summed in `(ci, kd, kh, kw)` order in `f64`, then the bias is added.
pub(crate) fn conv3d_forward<T: Element>(
    x: &[T],
    xd: [usize; 5],
    w: &[T],
    bias: Option<&[T]>,
    p: &ConvParams,
) -> Result<(Vec<T>, [usize; 5])> {
    let od = p.output_dims(xd)?;
    let planes = PhasePlanes::split(x, xd, p);
    Ok((conv_forward_planes(&planes, xd, od, w, bias, p), od))
}

multiversion! {
fn conv_forward_planes(
    planes: &PhasePlanes,
    xd: [usize; 5],
    od: [usize; 5],
    w: &[T],
    bias: Option<&[T]>,
    p: &ConvParams
) -> Vec<T> {
    let [n, cin, d, _, _] = xd;
    let [_, cout, o_d, o_h, o_w] = od;
    let [kd_n, kh_n, kw_n] = p.kernel;
    let (sd, pd) = (p.stride[0], p.padding[0]);
    let kvol = p.kernel_volume();
    let run = o_h * planes.row;
    let wf: Vec<f64> = w.iter().map(|v| v.to_f64()).collect();

    let mut out = vec![T::ZERO; n * cout * o_d * o_h * o_w];
    let mut acc = vec![0.0f64; run];
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(cin * kvol);
    for b in 0..n {
        for co in 0..cout {
            for z in 0..o_d {
                taps.clear();
                for ci in 0..cin {
                    let wc = (co * cin + ci) * kvol;
                    for kd in 0..kd_n {
                        let Some(iz) = offset(z, sd, kd, pd).filter(|&i| i < d) else {
                            continue;
                        };
                        let ncz = (b * cin + ci) * d + iz;
                        for kh in 0..kh_n {
                            for kw in 0..kw_n {
                                let wv = wf[wc + (kd * kh_n + kh) * kw_n + kw];
                                taps.push((planes.tap_offset(ncz, kh, kw), wv));
                            }
                        }
                    }
                }
                accumulate_taps(&mut acc, &planes.data, &taps);
                let bv = bias.map(|bs| bs[co].to_f64());
                let plane = &mut out[((b * cout + co) * o_d + z) * o_h * o_w..][..o_h * o_w];
                for y in 0..o_h {
                    let src = &acc[y * planes.row..][..o_w];
                    for (o, a) in plane[y * o_w..][..o_w].iter_mut().zip(src) {
                        *o = T::from_f64(match bv {
                            Some(bv) => a + bv,
                            None => *a,
                        });
                    }
                }
            }
        }
    }
    out
}
}

/// Gradients of a convolution with respect to its input and weight; each is
/// only computed when requested.
pub(crate) fn conv3d_backward<T: Element>(
    x: &[T],
    xd: [usize; 5],
    w: &[T],
    p: &ConvParams,
    g: &[f64],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let od = p.output_dims(xd).expect("validated in forward");
    let planes = want_w.then(|| PhasePlanes::split(x, xd, p));
    let mut gplanes = want_x.then(|| PhasePlanes::zeros(xd, p));
    let mut gw = want_w.then(|| vec![0.0f64; w.len()]);
    conv_backward_planes::<T>(planes.as_ref(), gplanes.as_mut(), gw.as_deref_mut(), xd, od, w, g, p);
    (gplanes.map(|gp| gp.merge(xd, p)), gw)
}

multiversion! {
fn conv_backward_planes(
    planes: Option<&PhasePlanes>,
    gplanes: Option<&mut PhasePlanes>,
    gw: Option<&mut [f64]>,
    xd: [usize; 5],
    od: [usize; 5],
    w: &[T],
    g: &[f64],
    p: &ConvParams
) -> () {
    let [n, cin, d, h, wid] = xd;
    let [_, cout, o_d, o_h, o_w] = od;
    let [kd_n, kh_n, kw_n] = p.kernel;
    let (sd, pd) = (p.stride[0], p.padding[0]);
    let kvol = p.kernel_volume();
    let (_, row) = PhasePlanes::geometry(h, wid, p);
    let run = o_h * row;
    let wf: Vec<f64> = w.iter().map(|v| v.to_f64()).collect();
    let mut gplanes = gplanes;
    let mut gw = gw;

    // Upstream gradient in the wide layout; padding columns stay zero.
    let mut gwide = vec![0.0f64; run];
    for b in 0..n {
        for co in 0..cout {
            for z in 0..o_d {
                let gsrc = &g[((b * cout + co) * o_d + z) * o_h * o_w..][..o_h * o_w];
                for y in 0..o_h {
                    gwide[y * row..][..o_w].copy_from_slice(&gsrc[y * o_w..][..o_w]);
                }
                for ci in 0..cin {
                    let wc = (co * cin + ci) * kvol;
                    for kd in 0..kd_n {
                        let Some(iz) = offset(z, sd, kd, pd).filter(|&i| i < d) else {
                            continue;
                        };
                        let ncz = (b * cin + ci) * d + iz;
                        for kh in 0..kh_n {
                            for kw in 0..kw_n {
                                let widx = wc + (kd * kh_n + kh) * kw_n + kw;
                                if let (Some(gw), Some(pl)) = (gw.as_deref_mut(), planes) {
                                    let start = pl.tap_offset(ncz, kh, kw);
                                    gw[widx] += dot(&gwide, &pl.data[start..start + run]);
                                }
                                if let Some(gp) = gplanes.as_deref_mut() {
                                    let start = gp.tap_offset(ncz, kh, kw);
                                    axpy(&mut gp.data[start..start + run], &gwide, wf[widx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
}

/// Window maximum; returns the flat input index of the winner of each window
/// (first occurrence in scan order on ties).
pub(crate) fn maxpool3d_forward<T: Element>(
    x: &[T],
    xd: [usize; 5],
    p: &PoolParams,
) -> Result<(Vec<T>, Vec<usize>, [usize; 5])> {
    let od = p.output_dims(xd)?;
    let [n, c, d, h, w] = xd;
    let [_, _, o_d, o_h, o_w] = od;
    let total = n * c * o_d * o_h * o_w;
    let mut out = Vec::with_capacity(total);
    let mut arg = Vec::with_capacity(total);
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..o_d {
            for y in 0..o_h {
                for xo in 0..o_w {
                    let mut best: Option<(T, usize)> = None;
                    for kd in 0..p.kernel[0] {
                        let Some(iz) = offset(z, p.stride[0], kd, p.padding[0]).filter(|&i| i < d)
                        else {
                            continue;
                        };
                        for kh in 0..p.kernel[1] {
                            let Some(iy) =
                                offset(y, p.stride[1], kh, p.padding[1]).filter(|&i| i < h)
                            else {
                                continue;
                            };
                            for kw in 0..p.kernel[2] {
                                let Some(ix) =
                                    offset(xo, p.stride[2], kw, p.padding[2]).filter(|&i| i < w)
                                else {
                                    continue;
                                };
                                let idx = base + (iz * h + iy) * w + ix;
                                let v = x[idx];
                                match best {
                                    Some((bv, _)) if !(v > bv) => {}
                                    _ => best = Some((v, idx)),
                                }
                            }
                        }
                    }
                    let (v, idx) = best.expect("every pooling window holds a voxel");
                    out.push(v);
                    arg.push(idx);
                }
            }
        }
    }
    Ok((out, arg, od))
}

/// `y[n, o] = sum_f x[n, f] * w[o, f] + b[o]`.
pub(crate) fn linear_forward<T: Element>(
    x: &[T],
    rows: usize,
    features: usize,
    w: &[T],
    outputs: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * outputs);
    for r in 0..rows {
        let xr = &x[r * features..][..features];
        for o in 0..outputs {
            let wr = &w[o * features..][..features];
            let mut acc = 0.0f64;
            for (a, b) in xr.iter().zip(wr) {
                acc += a.to_f64() * b.to_f64();
            }
            if let Some(b) = bias {
                acc += b[o].to_f64();
            }
            y.push(T::from_f64(acc));
        }
    }
    y
}
