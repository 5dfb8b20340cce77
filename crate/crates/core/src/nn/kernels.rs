//! Forward kernels and their adjoints on flat row-major buffers.

use crate::error::{invalid, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_rows(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &a[r * n..(r + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..n {
            let e = (row[c] - mx).exp();
            out[r * n + c] = e;
            s += e;
        }
        for c in 0..n {
            out[r * n + c] /= s;
        }
    }
    out
}

pub fn conv_weight_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [a, b, k] => Ok((*a, *b, *k)),
        s => Err(invalid(format!("conv weight must be rank 3, got shape {s:?}"))),
    }
}

/// `floor((n + 2 pad - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = n + 2 * pad;
    (span >= k && stride > 0).then(|| (span - k) / stride + 1)
}

/// Input row feeding output row `t` through tap `j`, if inside the signal.
#[inline]
fn src_row(t: usize, j: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let p = t * stride + j;
    (p >= pad && p - pad < len).then(|| p - pad)
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let out_len = conv_out_len(len, k, stride, pad).unwrap_or(0);
    let mut y = vec![0.0; out_len * cout];
    for t in 0..out_len {
        for co in 0..cout {
            let mut acc = b[co];
            for j in 0..k {
                let Some(r) = src_row(t, j, stride, pad, len) else {
                    continue;
                };
                for ci in 0..cin {
                    acc += w[(co * cin + ci) * k + j] * x[r * cin + ci];
                }
            }
            y[t * cout + co] = acc;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_len = g.len() / cout;
    let mut gx = vec![0.0; len * cin];
    let mut gw = vec![0.0; cout * cin * k];
    let mut gb = vec![0.0; cout];
    for t in 0..out_len {
        for co in 0..cout {
            let gy = g[t * cout + co];
            gb[co] += gy;
            for j in 0..k {
                let Some(r) = src_row(t, j, stride, pad, len) else {
                    continue;
                };
                for ci in 0..cin {
                    let wi = (co * cin + ci) * k + j;
                    gw[wi] += gy * x[r * cin + ci];
                    gx[r * cin + ci] += gy * w[wi];
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Output row written by input row `t` through tap `j`, after cropping `pad`.
#[inline]
fn dst_row(t: usize, j: usize, stride: usize, pad: usize, out_len: usize) -> Option<usize> {
    let p = t * stride + j;
    (p >= pad && p - pad < out_len).then(|| p - pad)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let out_len = (len - 1) * stride + k - 2 * pad;
    let mut y = vec![0.0; out_len * cout];
    for r in 0..out_len {
        y[r * cout..(r + 1) * cout].copy_from_slice(b);
    }
    for t in 0..len {
        for j in 0..k {
            let Some(r) = dst_row(t, j, stride, pad, out_len) else {
                continue;
            };
            for ci in 0..cin {
                let xv = x[t * cin + ci];
                for co in 0..cout {
                    y[r * cout + co] += xv * w[(ci * cout + co) * k + j];
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_len = g.len() / cout;
    let mut gx = vec![0.0; len * cin];
    let mut gw = vec![0.0; cin * cout * k];
    let mut gb = vec![0.0; cout];
    for r in 0..out_len {
        for co in 0..cout {
            gb[co] += g[r * cout + co];
        }
    }
    for t in 0..len {
        for j in 0..k {
            let Some(r) = dst_row(t, j, stride, pad, out_len) else {
                continue;
            };
            for ci in 0..cin {
                let xv = x[t * cin + ci];
                let mut acc = 0.0;
                for co in 0..cout {
                    let wi = (ci * cout + co) * k + j;
                    let gy = g[r * cout + co];
                    gw[wi] += xv * gy;
                    acc += w[wi] * gy;
                }
                gx[t * cin + ci] += acc;
            }
        }
    }
    (gx, gw, gb)
}

pub fn check_rope(rows: usize, d: usize, positions: &[usize]) -> Result<()> {
    if !d.is_multiple_of(2) {
        return Err(invalid(format!("rope needs an even width, got {d}")));
    }
    if positions.len() != rows {
        return Err(invalid(format!(
            "rope got {} positions for {rows} rows",
            positions.len()
        )));
    }
    Ok(())
}

/// Rotates pairs `(2i, 2i+1)` of row `r` by `positions[r] * base^(-2i/d)`;
/// `inverse` rotates the other way (the adjoint).
pub fn rope(x: &[f64], rows: usize, d: usize, positions: &[usize], base: f64, inverse: bool) -> Vec<f64> {
    let mut y = vec![0.0; rows * d];
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..rows {
        let p = positions[r] as f64;
        for i in 0..d / 2 {
            let theta = sign * p * base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let a = x[r * d + 2 * i];
            let b = x[r * d + 2 * i + 1];
            y[r * d + 2 * i] = a * c - b * s;
            y[r * d + 2 * i + 1] = a * s + b * c;
        }
    }
    y
}

fn row_rms(row: &[f64], eps: f64) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + eps).sqrt()
}

pub fn token_scale(x: &[f64], rows: usize, c: usize, eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; rows * c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let rms = row_rms(row, eps);
        if rms > 0.0 {
            for j in 0..c {
                y[r * c + j] = row[j] / rms;
            }
        }
    }
    y
}

pub fn token_scale_backward(g: &[f64], x: &[f64], rows: usize, c: usize, eps: f64) -> Vec<f64> {
    let mut gx = vec![0.0; rows * c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let gr = &g[r * c..(r + 1) * c];
        let rms = row_rms(row, eps);
        if rms <= 0.0 {
            continue;
        }
        let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
        let k = dot / (c as f64 * rms * rms * rms);
        for j in 0..c {
            gx[r * c + j] = gr[j] / rms - row[j] * k;
        }
    }
    gx
}
