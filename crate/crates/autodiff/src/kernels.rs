//! Batched numeric kernels shared by the forward and backward passes.

use crate::element::{gemm, lit, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C*K*K, Ho*Wo]`.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let spatial = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `[C, H, W]`.
fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let spatial = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let spatial = g.out_h() * g.out_w();
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * spatial;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * spatial]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        gemm(
            g.out_ch,
            g.patch(),
            spatial,
            w,
            false,
            cols_ref,
            false,
            &mut out[n * out_len..(n + 1) * out_len],
            false,
        );
    }
    out
}

/// Returns `(d_input, d_weight)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let spatial = g.out_h() * g.out_w();
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * spatial;
    let patch = g.patch();
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); patch * spatial];
    let mut dcols = vec![T::zero(); patch * spatial];
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            gemm(g.out_ch, spatial, patch, dyn_, false, cols_ref, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(patch, g.out_ch, spatial, w, true, dyn_, false, dxn, true);
            } else {
                gemm(patch, g.out_ch, spatial, w, true, dyn_, false, &mut dcols, false);
                col2im(g, &dcols, dxn);
            }
        }
    }
    (dx, dw)
}

pub(crate) fn upsample2x_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (oy / 2) * w + ox / 2;
                dst[i] = dst[i] + src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Per-plane standardization. Returns `(normalized, inv_std per plane)`.
pub(crate) fn instance_norm_forward<T: Element>(
    x: &[T],
    planes: usize,
    plane_len: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(planes);
    for p in 0..planes {
        let src = &x[p * plane_len..(p + 1) * plane_len];
        let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / plane_len as f64;
        let mean_t: T = lit(mean);
        let var = src
            .iter()
            .map(|&v| {
                let d = (v - mean_t).as_f64();
                d * d
            })
            .sum::<f64>()
            / plane_len as f64;
        let inv: T = lit(1.0 / (var + eps).sqrt());
        inv_std.push(inv);
        for (o, &v) in out[p * plane_len..(p + 1) * plane_len].iter_mut().zip(src) {
            *o = (v - mean_t) * inv;
        }
    }
    (out, inv_std)
}

pub(crate) fn instance_norm_backward<T: Element>(
    y: &[T],
    dy: &[T],
    inv_std: &[T],
    plane_len: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let n = plane_len as f64;
    for (p, &inv) in inv_std.iter().enumerate() {
        let range = p * plane_len..(p + 1) * plane_len;
        let (yp, gp) = (&y[range.clone()], &dy[range.clone()]);
        let mean_g: T = lit(gp.iter().map(|g| g.as_f64()).sum::<f64>() / n);
        let mean_gy: T = lit(
            gp.iter()
                .zip(yp)
                .map(|(g, y)| g.as_f64() * y.as_f64())
                .sum::<f64>()
                / n,
        );
        for ((d, &g), &yv) in dx[range].iter_mut().zip(gp).zip(yp) {
            *d = inv * (g - mean_g - yv * mean_gy);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution.
    fn conv_direct(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.in_ch + c) * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((o * g.in_ch + c) * g.kernel + ky) * g.kernel + kx];
                                }
                            }
                        }
                        out[((n * g.out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_summation() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1), (3, 1, 0)] {
            let g = ConvGeom { batch: 2, in_ch: 3, height: 7, width: 6, out_ch: 4, kernel: k, stride, pad };
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 104729) % 89) as f64 / 89.0 - 0.5).collect();
            let got = conv2d_forward(&g, &x, &w);
            let want = conv_direct(&g, &x, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { batch: 1, in_ch: 2, height: 5, width: 5, out_ch: 1, kernel: 3, stride: 2, pad: 1 };
        let spatial = g.out_h() * g.out_w();
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let c: Vec<f64> = (0..g.patch() * spatial).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn constant_plane_normalizes_to_zero() {
        let x = vec![0.731f32; 16];
        let (y, _) = instance_norm_forward(&x, 1, 16, 1e-8);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
