//! Low-level numeric kernels behind the autodiff ops.
//!
//! Kernel weights use the layout `(C_in, C_out, KH, KW)`; feature maps are
//! `(B, C, Y, X)` row-major. All functions are plain buffer transforms so
//! the tape in [`crate::autodiff`] stays free of index arithmetic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry shared by a convolution and its transposed counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub ih: usize,
    pub iw: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn infer(input_shape: &[usize], kernel_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be rank 4, got {:?}", input_shape)));
        }
        if kernel_shape.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {:?}", kernel_shape)));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        let (batch, c_in, ih, iw) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (kc_in, c_out, kh, kw) = (kernel_shape[0], kernel_shape[1], kernel_shape[2], kernel_shape[3]);
        if kc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channel axis is {} but kernel expects {}", c_in, kc_in),
            ));
        }
        if ih + 2 * pad < kh || iw + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("spatial axes ({ih},{iw}) with pad {pad} smaller than kernel ({kh},{kw})"),
            ));
        }
        let oh = (ih + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { batch, c_in, c_out, ih, iw, kh, kw, stride, pad, oh, ow })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.oh, self.ow]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_in, self.ih, self.iw]
    }

    /// Range of output columns `ox` for which `ox*stride + kx - pad` lands
    /// inside `[0, iw)`, plus the input column of the first one.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let max_ix = self.iw + self.pad;
        let hi = if kx >= max_ix {
            0
        } else {
            (((max_ix - 1 - kx) / self.stride) + 1).min(self.ow)
        };
        let first_ix = if hi > lo { lo * self.stride + kx - self.pad } else { 0 };
        (lo, hi, first_ix)
    }

    #[inline]
    fn iy_of(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        if iy < self.pad || iy >= self.ih + self.pad {
            None
        } else {
            Some(iy - self.pad)
        }
    }
}

pub fn conv_fwd<S: Scalar>(g: &ConvGeom, input: &[S], kernel: &[S], bias: Option<&[S]>) -> Vec<S> {
    let mut out = vec![S::zero(); g.batch * g.c_out * g.oh * g.ow];
    let oplane = g.oh * g.ow;
    let iplane = g.ih * g.iw;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let oslab = &mut out[(b * g.c_out + co) * oplane..][..oplane];
            if let Some(bias) = bias {
                oslab.fill(bias[co]);
            }
            for ci in 0..g.c_in {
                let islab = &input[(b * g.c_in + ci) * iplane..][..iplane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let w = kernel[((ci * g.c_out + co) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi, first_ix) = g.ox_range(kx);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(iy) = g.iy_of(oy, ky) else { continue };
                            let orow = &mut oslab[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let irow = &islab[iy * g.iw + first_ix..];
                            if g.stride == 1 {
                                for (o, &i) in orow.iter_mut().zip(irow) {
                                    *o = *o + w * i;
                                }
                            } else {
                                for (n, o) in orow.iter_mut().enumerate() {
                                    *o = *o + w * irow[n * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input; also the forward pass of the
/// transposed convolution (maps the output space back to the input space).
pub fn conv_bwd_input<S: Scalar>(g: &ConvGeom, gout: &[S], kernel: &[S]) -> Vec<S> {
    let mut din = vec![S::zero(); g.batch * g.c_in * g.ih * g.iw];
    let oplane = g.oh * g.ow;
    let iplane = g.ih * g.iw;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let oslab = &gout[(b * g.c_out + co) * oplane..][..oplane];
            for ci in 0..g.c_in {
                let islab = &mut din[(b * g.c_in + ci) * iplane..][..iplane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let w = kernel[((ci * g.c_out + co) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi, first_ix) = g.ox_range(kx);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(iy) = g.iy_of(oy, ky) else { continue };
                            let orow = &oslab[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let irow = &mut islab[iy * g.iw + first_ix..];
                            if g.stride == 1 {
                                for (i, &o) in irow.iter_mut().zip(orow) {
                                    *i = *i + w * o;
                                }
                            } else {
                                for (n, &o) in orow.iter().enumerate() {
                                    irow[n * g.stride] = irow[n * g.stride] + w * o;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// Gradient w.r.t. the kernel, given the forward input and the output
/// cotangent.
pub fn conv_bwd_kernel<S: Scalar>(g: &ConvGeom, input: &[S], gout: &[S]) -> Vec<S> {
    let mut dk = vec![S::zero(); g.c_in * g.c_out * g.kh * g.kw];
    let oplane = g.oh * g.ow;
    let iplane = g.ih * g.iw;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let oslab = &gout[(b * g.c_out + co) * oplane..][..oplane];
            for ci in 0..g.c_in {
                let islab = &input[(b * g.c_in + ci) * iplane..][..iplane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi, first_ix) = g.ox_range(kx);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        let mut acc = S::zero();
                        for oy in 0..g.oh {
                            let Some(iy) = g.iy_of(oy, ky) else { continue };
                            let orow = &oslab[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let irow = &islab[iy * g.iw + first_ix..];
                            if g.stride == 1 {
                                for (&o, &i) in orow.iter().zip(irow) {
                                    acc = acc + o * i;
                                }
                            } else {
                                for (n, &o) in orow.iter().enumerate() {
                                    acc = acc + o * irow[n * g.stride];
                                }
                            }
                        }
                        let slot = &mut dk[((ci * g.c_out + co) * g.kh + ky) * g.kw + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    }
    dk
}

/// Pooling geometry (square window, no padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub ch: usize,
    pub ih: usize,
    pub iw: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn infer(input_shape: &[usize], k: usize, stride: usize) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape("pool2d", format!("input must be rank 4, got {:?}", input_shape)));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Config("pool kernel and stride must be >= 1".into()));
        }
        let (batch, ch, ih, iw) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        if ih < k || iw < k {
            return Err(Error::shape("pool2d", format!("spatial axes ({ih},{iw}) smaller than window {k}")));
        }
        let oh = (ih - k) / stride + 1;
        let ow = (iw - k) / stride + 1;
        Ok(PoolGeom { batch, ch, ih, iw, k, stride, oh, ow })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.ch, self.oh, self.ow]
    }
}

/// Max pooling. Returns per-output argmax positions as linear indices into
/// the `(ih, iw)` plane; ties go to the lowest linear index.
pub fn maxpool_fwd<S: Scalar>(g: &PoolGeom, input: &[S]) -> (Vec<S>, Vec<u32>) {
    let planes = g.batch * g.ch;
    let mut out = vec![S::zero(); planes * g.oh * g.ow];
    let mut idx = vec![0u32; planes * g.oh * g.ow];
    let iplane = g.ih * g.iw;
    let oplane = g.oh * g.ow;
    for p in 0..planes {
        let islab = &input[p * iplane..][..iplane];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, x0) = (oy * g.stride, ox * g.stride);
                let mut best = islab[y0 * g.iw + x0];
                let mut best_i = (y0 * g.iw + x0) as u32;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let li = (y0 + ky) * g.iw + (x0 + kx);
                        let v = islab[li];
                        if v > best {
                            best = v;
                            best_i = li as u32;
                        }
                    }
                }
                out[p * oplane + oy * g.ow + ox] = best;
                idx[p * oplane + oy * g.ow + ox] = best_i;
            }
        }
    }
    (out, idx)
}

/// Places each input value at its recorded argmax position, zero elsewhere.
pub fn max_unpool<S: Scalar>(
    values: &[S],
    idx: &[u32],
    planes: usize,
    oplane: usize,
    in_spatial: usize,
) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); planes * in_spatial];
    for p in 0..planes {
        for o in 0..oplane {
            let li = idx[p * oplane + o] as usize;
            if li >= in_spatial {
                return Err(Error::Corrupt(format!(
                    "pool index {} out of bounds for plane of {} elements",
                    li, in_spatial
                )));
            }
            let slot = &mut out[p * in_spatial + li];
            *slot = *slot + values[p * oplane + o];
        }
    }
    Ok(out)
}

/// Average (`scale = 1/k²`) or sum (`scale = 1`) pooling.
pub fn window_pool_fwd<S: Scalar>(g: &PoolGeom, input: &[S], scale: S) -> Vec<S> {
    let planes = g.batch * g.ch;
    let mut out = vec![S::zero(); planes * g.oh * g.ow];
    let iplane = g.ih * g.iw;
    let oplane = g.oh * g.ow;
    for p in 0..planes {
        let islab = &input[p * iplane..][..iplane];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, x0) = (oy * g.stride, ox * g.stride);
                let mut acc = S::zero();
                for ky in 0..g.k {
                    let row = &islab[(y0 + ky) * g.iw + x0..][..g.k];
                    for &v in row {
                        acc = acc + v;
                    }
                }
                out[p * oplane + oy * g.ow + ox] = acc * scale;
            }
        }
    }
    out
}

/// Distributes `scale * gout` uniformly back over each pooling window.
pub fn window_pool_bwd<S: Scalar>(g: &PoolGeom, gout: &[S], scale: S) -> Vec<S> {
    let planes = g.batch * g.ch;
    let mut din = vec![S::zero(); planes * g.ih * g.iw];
    let iplane = g.ih * g.iw;
    let oplane = g.oh * g.ow;
    for p in 0..planes {
        let islab = &mut din[p * iplane..][..iplane];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = gout[p * oplane + oy * g.ow + ox] * scale;
                let (y0, x0) = (oy * g.stride, ox * g.stride);
                for ky in 0..g.k {
                    let row = &mut islab[(y0 + ky) * g.iw + x0..][..g.k];
                    for v in row {
                        *v = *v + gv;
                    }
                }
            }
        }
    }
    din
}

/// `out[b,o] = bias[o] + Σ_i input[b,i] * weight[i,o]` with weight `(in, out)`.
pub fn linear_fwd<S: Scalar>(
    batch: usize,
    n_in: usize,
    n_out: usize,
    input: &[S],
    weight: &[S],
    bias: Option<&[S]>,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * n_out];
    for b in 0..batch {
        let orow = &mut out[b * n_out..][..n_out];
        if let Some(bias) = bias {
            orow.copy_from_slice(bias);
        }
        let irow = &input[b * n_in..][..n_in];
        for (i, &x) in irow.iter().enumerate() {
            let wrow = &weight[i * n_out..][..n_out];
            for (o, &w) in orow.iter_mut().zip(wrow) {
                *o = *o + x * w;
            }
        }
    }
    out
}

/// `out[b,i] = Σ_o input[b,o] * weight[i,o]` — the transposed layer.
pub fn linear_t_fwd<S: Scalar>(
    batch: usize,
    n_in: usize,
    n_out: usize,
    input: &[S],
    weight: &[S],
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * n_in];
    for b in 0..batch {
        let srow = &input[b * n_out..][..n_out];
        let orow = &mut out[b * n_in..][..n_in];
        for (i, o) in orow.iter_mut().enumerate() {
            let wrow = &weight[i * n_out..][..n_out];
            let mut acc = S::zero();
            for (&s, &w) in srow.iter().zip(wrow) {
                acc = acc + s * w;
            }
            *o = acc;
        }
    }
    out
}

/// `dw[i,o] = Σ_b input[b,i] * gout[b,o]`.
pub fn linear_bwd_weight<S: Scalar>(
    batch: usize,
    n_in: usize,
    n_out: usize,
    input: &[S],
    gout: &[S],
) -> Vec<S> {
    let mut dw = vec![S::zero(); n_in * n_out];
    for b in 0..batch {
        let irow = &input[b * n_in..][..n_in];
        let grow = &gout[b * n_out..][..n_out];
        for (i, &x) in irow.iter().enumerate() {
            let wrow = &mut dw[i * n_out..][..n_out];
            for (w, &g) in wrow.iter_mut().zip(grow) {
                *w = *w + x * g;
            }
        }
    }
    dw
}
