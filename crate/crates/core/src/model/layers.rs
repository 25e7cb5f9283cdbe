//! Forward and backward kernels for the reference backbone. All tensors are
//! flat row-major `(n, c, h, w)` buffers.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }
}

const K: usize = 3;

/// Unfolds one `(c, h, w)` sample into columns of a `(c·9, ·)` patch matrix
/// for a 3×3 convolution with zero padding 1. Patch row `r` of the sample
/// lands at `cols[r * stride + offset..][..h·w]`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64], stride: usize, offset: usize) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ci * K + ky) * K + kx) * stride + offset..][..hw];
                for oy in 0..h {
                    let out = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64], stride: usize, offset: usize) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ci * K + ky) * K + kx) * stride + offset..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let g = &row[oy * w..(oy + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&g[1..]).for_each(|(d, v)| *d += v),
                        1 => dst.iter_mut().zip(g).for_each(|(d, v)| *d += v),
                        _ => dst[1..].iter_mut().zip(&g[..w - 1]).for_each(|(d, v)| *d += v),
                    }
                }
            }
        }
    }
}

/// Target size (in elements) of one im2col patch buffer; the batch is
/// processed in sample chunks so the patch matrix stays cache-resident.
const CHUNK_ELEMS: usize = 1 << 16;

fn chunk_samples(k: usize, hw: usize) -> usize {
    (CHUNK_ELEMS / (k * hw)).max(1)
}

/// 3×3 same-padding convolution without bias. `weight` is
/// `(c_out, c_in, 3, 3)`.
pub fn conv3x3_forward(x: &[f64], dims: Dims, weight: &[f64], c_out: usize) -> Vec<f64> {
    let hw = dims.plane();
    let k = dims.c * K * K;
    let per = chunk_samples(k, hw);
    let wmat = ArrayView2::from_shape((c_out, k), weight).expect("weight shape");
    let mut cols = vec![0.0; k * per * hw];
    let mut tmp = vec![0.0; c_out * per * hw];
    let mut out = vec![0.0; dims.n * c_out * hw];
    for start in (0..dims.n).step_by(per) {
        let m = per.min(dims.n - start);
        let width = m * hw;
        for j in 0..m {
            let i = start + j;
            let x_i = &x[i * dims.sample()..(i + 1) * dims.sample()];
            im2col(x_i, dims.c, dims.h, dims.w, &mut cols, width, j * hw);
        }
        let col_v = ArrayView2::from_shape((k, width), &cols[..k * width]).expect("cols shape");
        let mut t = ArrayViewMut2::from_shape((c_out, width), &mut tmp[..c_out * width]).expect("tmp shape");
        general_mat_mul(1.0, &wmat, &col_v, 0.0, &mut t);
        for j in 0..m {
            for co in 0..c_out {
                out[((start + j) * c_out + co) * hw..][..hw].copy_from_slice(&tmp[co * width + j * hw..][..hw]);
            }
        }
    }
    out
}

/// Accumulates the weight gradient into `grad_weight` and, when requested,
/// returns the input gradient. `x` is the forward input; patches are
/// rebuilt rather than stored.
pub fn conv3x3_backward(
    grad_out: &[f64],
    x: &[f64],
    dims: Dims,
    weight: &[f64],
    c_out: usize,
    grad_weight: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let hw = dims.plane();
    let k = dims.c * K * K;
    let per = chunk_samples(k, hw);
    let wmat = ArrayView2::from_shape((c_out, k), weight).expect("weight shape");
    let mut gw = ArrayViewMut2::from_shape((c_out, k), grad_weight).expect("grad shape");
    let mut cols = vec![0.0; k * per * hw];
    let mut g = vec![0.0; c_out * per * hw];
    let mut dcols = vec![0.0; if want_input_grad { k * per * hw } else { 0 }];
    let mut dx = want_input_grad.then(|| vec![0.0; dims.len()]);
    for start in (0..dims.n).step_by(per) {
        let m = per.min(dims.n - start);
        let width = m * hw;
        for j in 0..m {
            let i = start + j;
            im2col(&x[i * dims.sample()..(i + 1) * dims.sample()], dims.c, dims.h, dims.w, &mut cols, width, j * hw);
            for co in 0..c_out {
                g[co * width + j * hw..][..hw].copy_from_slice(&grad_out[(i * c_out + co) * hw..][..hw]);
            }
        }
        let col_v = ArrayView2::from_shape((k, width), &cols[..k * width]).expect("cols shape");
        let g_v = ArrayView2::from_shape((c_out, width), &g[..c_out * width]).expect("grad shape");
        general_mat_mul(1.0, &g_v, &col_v.t(), 1.0, &mut gw);
        if let Some(dx) = dx.as_mut() {
            let mut dc = ArrayViewMut2::from_shape((k, width), &mut dcols[..k * width]).expect("dcols shape");
            general_mat_mul(1.0, &wmat.t(), &g_v, 0.0, &mut dc);
            for j in 0..m {
                let i = start + j;
                let dx_i = &mut dx[i * dims.sample()..(i + 1) * dims.sample()];
                col2im(&dcols, dims.c, dims.h, dims.w, dx_i, width, j * hw);
            }
        }
    }
    dx
}

/// Per-channel batch statistics (biased variance) of a `(n, c, h, w)` buffer.
pub fn channel_stats(x: &[f64], dims: Dims) -> (Vec<f64>, Vec<f64>) {
    let hw = dims.plane();
    let m = (dims.n * hw) as f64;
    let mut mean = vec![0.0; dims.c];
    let mut var = vec![0.0; dims.c];
    for c in 0..dims.c {
        let mut s = 0.0;
        for i in 0..dims.n {
            s += x[(i * dims.c + c) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..dims.n {
            v += x[(i * dims.c + c) * hw..][..hw]
                .iter()
                .map(|&t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = v / m;
    }
    (mean, var)
}

/// Normalizes `x` in place to `x̂ = (x - mean) / sqrt(var + eps)` and
/// returns `relu(γ x̂ + β)` with the per-channel inverse standard deviations.
pub fn batch_norm_relu_forward(
    x: &mut [f64],
    dims: Dims,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let hw = dims.plane();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut act = vec![0.0; x.len()];
    for i in 0..dims.n {
        for c in 0..dims.c {
            let off = (i * dims.c + c) * hw;
            let (m, s, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for (xv, a) in x[off..off + hw].iter_mut().zip(&mut act[off..off + hw]) {
                let v = (*xv - m) * s;
                *xv = v;
                *a = (g * v + b).max(0.0);
            }
        }
    }
    (act, inv_std)
}

/// Backward pass of training-mode batch normalization applied to the
/// pre-normalization gradient `grad` in place. Accumulates `dγ`, `dβ`.
pub fn batch_norm_backward(
    grad: &mut [f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dims: Dims,
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    let hw = dims.plane();
    let m = (dims.n * hw) as f64;
    for c in 0..dims.c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..dims.n {
            let off = (i * dims.c + c) * hw;
            for (g, xh) in grad[off..off + hw].iter().zip(&xhat[off..off + hw]) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        grad_gamma[c] += sum_dy_xhat;
        grad_beta[c] += sum_dy;
        let scale = gamma[c] * inv_std[c] / m;
        for i in 0..dims.n {
            let off = (i * dims.c + c) * hw;
            for (g, xh) in grad[off..off + hw].iter_mut().zip(&xhat[off..off + hw]) {
                *g = scale * (m * *g - sum_dy - xh * sum_dy_xhat);
            }
        }
    }
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2_forward(x: &[f64], dims: Dims) -> Vec<f64> {
    let (oh, ow) = (dims.h / 2, dims.w / 2);
    let mut out = vec![0.0; dims.n * dims.c * oh * ow];
    for nc in 0..dims.n * dims.c {
        let src = &x[nc * dims.plane()..(nc + 1) * dims.plane()];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..oh {
            let (r0, r1) = (&src[2 * y * dims.w..], &src[(2 * y + 1) * dims.w..]);
            for xx in 0..ow {
                dst[y * ow + xx] = 0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
    out
}

/// Backward of [`avg_pool2_forward`] fused with the ReLU of
/// [`batch_norm_relu_forward`]; the mask `γ x̂ + β > 0` is rebuilt from the
/// normalized input. Returns the gradient with respect to `γ x̂ + β`.
pub fn avg_pool2_relu_backward(grad_out: &[f64], xhat: &[f64], gamma: &[f64], beta: &[f64], dims: Dims) -> Vec<f64> {
    let (oh, ow) = (dims.h / 2, dims.w / 2);
    let mut dx = vec![0.0; dims.len()];
    for nc in 0..dims.n * dims.c {
        let (g_c, b_c) = (gamma[nc % dims.c], beta[nc % dims.c]);
        let g = &grad_out[nc * oh * ow..(nc + 1) * oh * ow];
        let base = nc * dims.plane();
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[y * ow + xx];
                let a = base + (2 * y) * dims.w + 2 * xx;
                for p in [a, a + 1, a + dims.w, a + dims.w + 1] {
                    if g_c * xhat[p] + b_c > 0.0 {
                        dx[p] = v;
                    }
                }
            }
        }
    }
    dx
}
