//! Independent oracles shared by the integration tests. None of these call
//! into the code they check, except to read inputs.

#![allow(dead_code)]

use std::f64::consts::PI;

use hrtfformer::grid::{Ear, HrtfSet, SphericalGrid};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Relative error with a floor so near-zero gradients compare absolutely.
/// Loss evaluations carry ~1e-15 rounding noise, which the stencil below
/// turns into ~1e-10 absolute gradient noise at `h = 1e-5`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Indices to probe: all of them when there are at most `k`.
pub fn probe_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v = sample(&mut rng(seed), n, k).into_vec();
    v.sort_unstable();
    v
}

/// Fourth-order central difference of `f` in coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[i];
    let mut at = |t: f64| {
        x[i] = x0 + t;
        f(x)
    };
    let d = 8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h));
    x[i] = x0;
    d / (12.0 * h)
}

/// Pairwise rotary embedding of one row.
pub fn rope_row(x: &[f64], p: usize) -> Vec<f64> {
    let d = x.len();
    let mut y = x.to_vec();
    for i in 0..d / 2 {
        let th = p as f64 * 10_000f64.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = th.sin_cos();
        y[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        y[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    y
}

/// Row-major `[r x c]` matrix times `[c x k]`.
pub fn mm(a: &[f64], r: usize, c: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        for j in 0..k {
            out[i * k + j] = (0..c).map(|t| a[i * c + t] * b[t * k + j]).sum();
        }
    }
    out
}

/// Textbook multi-head self-attention: every head owns its own `wk`, `wv`
/// column block. Weights are `[d x d]` and row-major.
#[allow(clippy::too_many_arguments)]
pub fn naive_mha(
    x: &[f64],
    seq: usize,
    d: usize,
    heads: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    bo: &[f64],
    positions: &[usize],
) -> Vec<f64> {
    let hd = d / heads;
    let q = mm(x, seq, d, wq, d);
    let k = mm(x, seq, d, wk, d);
    let v = mm(x, seq, d, wv, d);
    let mut cat = vec![0.0; seq * d];
    for h in 0..heads {
        let block = |m: &[f64], t: usize| m[t * d + h * hd..t * d + (h + 1) * hd].to_vec();
        let qs: Vec<Vec<f64>> = (0..seq).map(|t| rope_row(&block(&q, t), positions[t])).collect();
        let ks: Vec<Vec<f64>> = (0..seq).map(|t| rope_row(&block(&k, t), positions[t])).collect();
        for i in 0..seq {
            let logits: Vec<f64> = (0..seq)
                .map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..seq {
                for c in 0..hd {
                    cat[i * d + h * hd + c] += e[j] / z * v[j * d + h * hd + c];
                }
            }
        }
    }
    let mut out = mm(&cat, seq, d, wo, d);
    for i in 0..seq {
        for j in 0..d {
            out[i * d + j] += bo[j];
        }
    }
    out
}

fn db(m: f64) -> f64 {
    20.0 * m.log10()
}

fn ear_db(set: &HrtfSet, dir: usize, ear: Ear, bin: usize) -> f64 {
    db(set.magnitude(dir, ear, bin))
}

const EARS: [Ear; 2] = [Ear::Left, Ear::Right];

pub fn lsd_loop(gen: &HrtfSet, r: &HrtfSet) -> f64 {
    let (n, w) = (r.n_directions(), r.n_bins());
    let mut total = 0.0;
    for ear in EARS {
        let mut acc = 0.0;
        for d in 0..n {
            let mut s = 0.0;
            for b in 0..w {
                let e = ear_db(r, d, ear, b) - ear_db(gen, d, ear, b);
                s += e * e;
            }
            acc += (s / w as f64).sqrt();
        }
        total += acc / n as f64;
    }
    total / 2.0
}

pub fn ild_loop(gen: &HrtfSet, r: &HrtfSet) -> f64 {
    let (n, w) = (r.n_directions(), r.n_bins());
    let mut acc = 0.0;
    for d in 0..n {
        for b in 0..w {
            let it = ear_db(r, d, Ear::Left, b) - ear_db(r, d, Ear::Right, b);
            let ip = ear_db(gen, d, Ear::Left, b) - ear_db(gen, d, Ear::Right, b);
            acc += (it - ip).abs();
        }
    }
    acc / (n * w) as f64
}

/// Neighbour-contrast loss written out with explicit neighbour sums.
pub fn ndl_loop(gen: &HrtfSet, r: &HrtfSet, grid: &SphericalGrid) -> f64 {
    let (n, w) = (r.n_directions(), r.n_bins());
    let err = |d: usize, ear: Ear, b: usize| ear_db(r, d, ear, b) - ear_db(gen, d, ear, b);
    let mut total = 0.0;
    for ear in EARS {
        let mut acc = 0.0;
        for d in 0..n {
            let nb = grid.neighbors(d).unwrap();
            for b in 0..w {
                let mean = nb.iter().map(|&j| err(j, ear, b)).sum::<f64>() / nb.len() as f64;
                let c = err(d, ear, b) - mean;
                acc += c * c;
            }
        }
        total += acc / (n * w) as f64;
    }
    total / 2.0
}

/// Delay (µs) maximising the band-limited cross-correlation, found by a
/// dense scan of fractional lags with a direct DFT. Positive when `right`
/// lags `left`.
pub fn itd_scan(left: &[f64], right: &[f64], fs: f64, cutoff_hz: f64, step: f64) -> f64 {
    let len = left.len().max(right.len());
    let n = (2 * len).next_power_of_two();
    let kmax = (cutoff_hz * n as f64 / fs).floor() as usize;
    let dft = |x: &[f64], k: usize| {
        x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
            let a = -2.0 * PI * (k * t) as f64 / n as f64;
            (re + v * a.cos(), im + v * a.sin())
        })
    };
    // conj(L) R per retained bin
    let cross: Vec<(f64, f64)> = (0..=kmax)
        .map(|k| {
            let (lr, li) = dft(left, k);
            let (rr, ri) = dft(right, k);
            (lr * rr + li * ri, lr * ri - li * rr)
        })
        .collect();
    let corr = |tau: f64| {
        cross.iter().enumerate().fold(0.0, |acc, (k, &(re, im))| {
            let a = 2.0 * PI * k as f64 * tau / n as f64;
            let wgt = if k == 0 { 1.0 } else { 2.0 };
            acc + wgt * (re * a.cos() - im * a.sin())
        })
    };
    let reach = (len - 1) as f64;
    let steps = (2.0 * reach / step).round() as usize;
    let (mut best, mut best_v) = (0.0, f64::NEG_INFINITY);
    for i in 0..=steps {
        let tau = -reach + i as f64 * step;
        let v = corr(tau);
        if v > best_v {
            best_v = v;
            best = tau;
        }
    }
    best * 1e6 / fs
}
