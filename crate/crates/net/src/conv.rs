//! Direct 3D convolution on `[N, C, D, H, W]` tensors with zero padding
//! `k / 2` per axis and an in-plane stride (depth is never strided).

use crate::error::{NetError, Result};
use crate::tensor::Tensor;

/// Output spatial size for one axis.
pub fn out_len(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

pub fn out_dims(x: [usize; 5], w: [usize; 5], stride: usize) -> [usize; 5] {
    [x[0], w[0], out_len(x[2], w[2], 1), out_len(x[3], w[3], stride), out_len(x[4], w[4], stride)]
}

fn check(x: &Tensor, w: &Tensor, stride: usize) -> Result<([usize; 5], [usize; 5])> {
    let xd = x.dims5()?;
    let wd = w.dims5()?;
    if xd[1] != wd[1] {
        return Err(NetError::Shape(format!("conv input channels {} vs weight {}", xd[1], wd[1])));
    }
    if stride == 0 || wd[2..].iter().any(|k| k % 2 == 0) {
        return Err(NetError::Shape(format!("unsupported kernel {:?} / stride {stride}", &wd[2..])));
    }
    Ok((xd, wd))
}

/// Range of output columns `o` with `o * s + off` inside `[0, n)`, where
/// `off = tap - pad` may be negative.
fn col_range(n: usize, n_out: usize, s: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let last = n as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last as usize) / s + 1).min(n_out);
    (lo.min(hi), hi)
}

/// Visits every `(input row, output row, weight)` triple of the convolution.
/// `f(x_row_offset, out_row_offset, col_lo, col_hi, col_off, weight_index)`.
fn for_each_tap(
    xd: [usize; 5],
    wd: [usize; 5],
    stride: usize,
    mut f: impl FnMut(usize, usize, usize, usize, isize, usize),
) {
    let od = out_dims(xd, wd, stride);
    let [n, ci_n, d, h, w] = xd;
    let [co_n, _, kd, kh, kw] = wd;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    for b in 0..n {
        for co in 0..co_n {
            for ci in 0..ci_n {
                for tz in 0..kd {
                    for ty in 0..kh {
                        for tx in 0..kw {
                            let wi = (((co * ci_n + ci) * kd + tz) * kh + ty) * kw + tx;
                            let col_off = tx as isize - pw;
                            let (lo, hi) = col_range(w, od[4], stride, col_off);
                            if lo >= hi {
                                continue;
                            }
                            for oz in 0..od[2] {
                                let iz = oz as isize + tz as isize - pd;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for oy in 0..od[3] {
                                    let iy = (oy * stride) as isize + ty as isize - ph;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let x_row = (((b * ci_n + ci) * d + iz as usize) * h + iy as usize) * w;
                                    let o_row = (((b * co_n + co) * od[2] + oz) * od[3] + oy) * od[4];
                                    f(x_row, o_row, lo, hi, col_off, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (xd, wd) = check(x, w, stride)?;
    let od = out_dims(xd, wd, stride);
    let mut out = Tensor::zeros(&od);
    let (xs, ws) = (x.data(), w.data());
    let o = out.data_mut();
    for_each_tap(xd, wd, stride, |x_row, o_row, lo, hi, off, wi| {
        let wv = ws[wi];
        for c in lo..hi {
            o[o_row + c] += wv * xs[(x_row as isize + (c * stride) as isize + off) as usize];
        }
    });
    if let Some(bias) = bias {
        if bias.len() != od[1] {
            return Err(NetError::Shape(format!("bias len {} vs {} channels", bias.len(), od[1])));
        }
        let plane = od[2] * od[3] * od[4];
        for (i, chunk) in o.chunks_mut(plane).enumerate() {
            let bv = bias.data()[i % od[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Gradients `(dx, dw, db)` of `conv3d` given the upstream gradient.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (xd, wd) = check(x, w, stride)?;
    let od = out_dims(xd, wd, stride);
    if grad_out.shape() != od {
        return Err(NetError::Shape(format!("conv grad {:?} vs {od:?}", grad_out.shape())));
    }
    let mut gx = Tensor::zeros(&xd);
    let mut gw = Tensor::zeros(&wd);
    let (xs, ws, gs) = (x.data(), w.data(), grad_out.data());
    {
        let gxs = gx.data_mut();
        let gws = gw.data_mut();
        for_each_tap(xd, wd, stride, |x_row, o_row, lo, hi, off, wi| {
            let wv = ws[wi];
            let mut acc = 0.0;
            for c in lo..hi {
                let xi = (x_row as isize + (c * stride) as isize + off) as usize;
                let g = gs[o_row + c];
                gxs[xi] += wv * g;
                acc += g * xs[xi];
            }
            gws[wi] += acc;
        });
    }
    let plane = od[2] * od[3] * od[4];
    let mut gb = Tensor::zeros(&[od[1]]);
    for (i, chunk) in gs.chunks(plane).enumerate() {
        gb.data_mut()[i % od[1]] += chunk.iter().sum::<f64>();
    }
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
        let xd = x.dims5().unwrap();
        let wd = w.dims5().unwrap();
        let od = out_dims(xd, wd, stride);
        let mut out = Tensor::zeros(&od);
        let at = |t: &Tensor, d: [usize; 5], i: [isize; 5]| -> f64 {
            if (0..5).any(|a| i[a] < 0 || i[a] >= d[a] as isize) {
                return 0.0;
            }
            let mut idx = 0;
            for a in 0..5 {
                idx = idx * d[a] + i[a] as usize;
            }
            t.data()[idx]
        };
        let mut k = 0;
        for b in 0..od[0] {
            for co in 0..od[1] {
                for z in 0..od[2] {
                    for y in 0..od[3] {
                        for xx in 0..od[4] {
                            let mut s = 0.0;
                            for ci in 0..xd[1] {
                                for tz in 0..wd[2] {
                                    for ty in 0..wd[3] {
                                        for tx in 0..wd[4] {
                                            let iz = z as isize + tz as isize - (wd[2] / 2) as isize;
                                            let iy = (y * stride) as isize + ty as isize - (wd[3] / 2) as isize;
                                            let ix = (xx * stride) as isize + tx as isize - (wd[4] / 2) as isize;
                                            let xv = at(x, xd, [b as isize, ci as isize, iz, iy, ix]);
                                            let wv = at(w, wd, [co as isize, ci as isize, tz as isize, ty as isize, tx as isize]);
                                            s += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[k] = s;
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], a: f64, b: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * a + b).sin()).collect()).unwrap()
    }

    #[test]
    fn matches_naive_for_all_kernel_shapes() {
        let x = seq(&[2, 3, 4, 7, 6], 0.37, 0.1);
        for k in [[1, 3, 3], [3, 1, 3], [3, 3, 1], [1, 1, 1], [3, 3, 3]] {
            for stride in [1, 2] {
                let w = seq(&[4, 3, k[0], k[1], k[2]], 0.91, 0.3);
                let got = conv3d(&x, &w, None, stride).unwrap();
                let want = naive(&x, &w, stride);
                assert_eq!(got.shape(), want.shape());
                for (a, b) in got.data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-12, "{k:?} s{stride}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = seq(&[1, 2, 3, 5, 5], 0.53, 0.2);
        let w = seq(&[2, 2, 3, 1, 3], 0.77, 0.4);
        let g = seq(&[1, 2, 3, 3, 3], 0.29, 0.9);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            let y = conv3d(x, w, None, 2).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (gx, gw, gb) = conv3d_backward(&x, &w, &g, 2).unwrap();
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-7);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
            assert!((fd - gw.data()[i]).abs() < 1e-7);
        }
        let per_channel: f64 = g.data()[..27].iter().sum();
        assert!((gb.data()[0] - per_channel).abs() < 1e-12);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 3, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 1, 1, 1]);
        assert!(conv3d(&x, &w, None, 1).is_err());
    }
}
