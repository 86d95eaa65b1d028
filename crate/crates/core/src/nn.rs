//! Forward and backward kernels for the generic layers: convolution,
//! bilinear upsampling, pooling and small dense operations.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Output spatial size of a "same"-padded convolution with the given stride.
pub fn conv_out_size(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

/// 2-D convolution. `x` is `(h, w, cin)`, `w` is `(kh, kw, cin, cout)`, `b` is `(cout)`.
/// Padding is `k / 2` with zeros.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, wd, cin) = x.check_dims3("conv2d input")?;
    if w.rank() != 4 || w.shape()[2] != cin || b.shape() != [w.shape()[3]] || stride == 0 {
        return Err(invalid(format!(
            "conv2d: input {:?}, weight {:?}, bias {:?}, stride {stride}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let oh = conv_out_size(h, kh, stride);
    let ow = conv_out_size(wd, kw, stride);
    let xd = x.data();
    let wdt = w.data();
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            o.copy_from_slice(b.data());
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pw as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xi = &xd[(iy as usize * wd + ix as usize) * cin..][..cin];
                    let wb = &wdt[(ky * kw + kx) * cin * cout..][..cin * cout];
                    for (ci, &a) in xi.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let wr = &wb[ci * cout..(ci + 1) * cout];
                        for (acc, &wv) in o.iter_mut().zip(wr) {
                            *acc += a * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, cout], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    need_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (h, wd, cin) = x.dims3();
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let (oh, ow, _) = grad_out.dims3();
    let xd = x.data();
    let wdt = w.data();
    let gd = grad_out.data();
    let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
    let mut gw = vec![0.0; wdt.len()];
    let mut gb = vec![0.0; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &gd[(oy * ow + ox) * cout..][..cout];
            for (acc, &g) in gb.iter_mut().zip(go) {
                *acc += g;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pw as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let base = (iy as usize * wd + ix as usize) * cin;
                    let wofs = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = xd[base + ci];
                        let wr = &wdt[wofs + ci * cout..][..cout];
                        if need_x {
                            let mut s = 0.0;
                            for (&g, &wv) in go.iter().zip(wr) {
                                s += g * wv;
                            }
                            gx[base + ci] += s;
                        }
                        if a != 0.0 {
                            let gwr = &mut gw[wofs + ci * cout..][..cout];
                            for (acc, &g) in gwr.iter_mut().zip(go) {
                                *acc += a * g;
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = need_x.then(|| Tensor::from_vec(x.shape(), gx).expect("shape"));
    (
        gx,
        Tensor::from_vec(w.shape(), gw).expect("shape"),
        Tensor::from_vec(&[cout], gb).expect("shape"),
    )
}

/// Source index and weight pairs for bilinear resampling along one axis
/// (half-pixel centers, edge clamped).
fn resample_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            (i0, i1, if i0 == i1 { 0.0 } else { t })
        })
        .collect()
}

/// Bilinear resize of an `(h, w, c)` map to `(oh, ow, c)`.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = x.dims3();
    let ty = resample_taps(h, oh);
    let tx = resample_taps(w, ow);
    let xd = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let o = &mut out[(oy * ow + ox) * c..][..c];
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            for (base, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                for (acc, &v) in o.iter_mut().zip(&xd[base..base + c]) {
                    *acc += wgt * v;
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out).expect("shape")
}

pub fn resize_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow, _) = grad_out.dims3();
    let ty = resample_taps(h, oh);
    let tx = resample_taps(w, ow);
    let gd = grad_out.data();
    let mut gx = vec![0.0; h * w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = &gd[(oy * ow + ox) * c..][..c];
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            for (base, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                for (acc, &v) in gx[base..base + c].iter_mut().zip(g) {
                    *acc += wgt * v;
                }
            }
        }
    }
    Tensor::from_vec(input_shape, gx).expect("shape")
}

/// Spatial mean of an `(h, w, c)` map, giving a length-`c` vector.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (h, w, c) = x.dims3();
    let mut out = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        for (acc, &v) in out.iter_mut().zip(px) {
            *acc += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Tensor::from_vec(&[c], out).expect("shape")
}

/// `w · x` for `w` of shape `(out, in)` and `x` of shape `(in)`.
pub fn mat_vec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.shape() != [w.shape()[1]] {
        return Err(invalid(format!("mat_vec: {:?} x {:?}", w.shape(), x.shape())));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let out = (0..rows)
        .map(|r| {
            w.data()[r * cols..(r + 1) * cols]
                .iter()
                .zip(x.data())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Tensor::from_vec(&[rows], out)
}

/// Numerically stable softmax of a vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_copies_input() {
        let x = Tensor::from_fn3(3, 4, 2, |y, x, c| (y * 8 + x * 2 + c) as f64);
        let mut w = Tensor::zeros(&[3, 3, 2, 2]);
        // center tap, identity channel map
        w.data_mut()[(4 * 2) * 2] = 1.0;
        w.data_mut()[(4 * 2 + 1) * 2 + 1] = 1.0;
        let out = conv2d(&x, &w, &Tensor::zeros(&[2]), 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn strided_conv_shape() {
        let x = Tensor::zeros(&[64, 128, 3]);
        let w = Tensor::zeros(&[3, 3, 3, 5]);
        let out = conv2d(&x, &w, &Tensor::zeros(&[5]), 2).unwrap();
        assert_eq!(out.shape(), &[32, 64, 5]);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::full(&[3, 5, 2], 1.5);
        let y = resize_bilinear(&x, 12, 20);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
