//! Real spherical harmonics, least-squares forward transform and synthesis.
//!
//! The basis is the real orthonormal one:
//!
//! ```text
//! Y_l^m  = sqrt(2) N_l^m  P_l^m (cos t) cos(m a)     m > 0
//! Y_l^0  =         N_l^0  P_l^0 (cos t)
//! Y_l^-m = sqrt(2) N_l^m  P_l^m (cos t) sin(m a)     m > 0
//! N_l^m  = sqrt((2l + 1) / (4 pi) * (l - m)! / (l + m)!)
//! ```
//!
//! with `t` the polar angle and `a` the azimuth. `P_l^m` carries the
//! Condon-Shortley phase `(-1)^m`, which is *not* cancelled in the real basis,
//! so odd-`m` functions have the opposite sign of the phase-free convention.
//! It is the real part (m > 0) or imaginary part (m < 0) of the complex
//! basis scaled by `sqrt(2)`, which is an exact unitary change of basis.
//!
//! Coefficient `(l, m)` lives at flat index `l^2 + l + m`.

use nalgebra::{DMatrix, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HrtfError, Result};
use crate::grid::{Direction, Ear, HrtfSet, SphericalGrid};

/// Largest order accepted by the basis evaluators.
pub const MAX_ORDER: usize = 40;

/// Relative singular-value threshold under which an unregularised fit is rejected.
pub const RANK_TOLERANCE: f64 = 1e-10;

pub fn n_coefficients(order: usize) -> usize {
    (order + 1) * (order + 1)
}

pub fn flat_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

/// Inverse of [`flat_index`].
pub fn degree_order(index: usize) -> (usize, i64) {
    let l = (index as f64).sqrt().floor() as usize;
    // guard against float rounding near perfect squares
    let l = if (l + 1) * (l + 1) <= index {
        l + 1
    } else if l * l > index {
        l - 1
    } else {
        l
    };
    (l, index as i64 - (l * l + l) as i64)
}

/// Associated Legendre function `P_l^m(x)` including the Condon-Shortley phase.
pub fn assoc_legendre(l: usize, m: usize, x: f64) -> Result<f64> {
    if m > l {
        return Err(invalid(format!("order m = {m} exceeds degree l = {l}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(invalid(format!("argument {x} outside [-1, 1]")));
    }
    Ok(legendre_column(l, m, x)[l - m])
}

/// `P_m^m .. P_lmax^m` at `x` by upward recurrence in degree.
fn legendre_column(lmax: usize, m: usize, x: f64) -> Vec<f64> {
    let somx2 = ((1.0 - x) * (1.0 + x)).sqrt();
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= -fact * somx2;
        fact += 2.0;
    }
    let mut out = Vec::with_capacity(lmax + 1 - m);
    out.push(pmm);
    if lmax == m {
        return out;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    out.push(pm1);
    let mut pm2 = pmm;
    for l in (m + 2)..=lmax {
        let pl = ((2 * l - 1) as f64 * x * pm1 - (l + m - 1) as f64 * pm2) / (l - m) as f64;
        out.push(pl);
        pm2 = pm1;
        pm1 = pl;
    }
    out
}

fn normalisation(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

/// All real SH values up to `order` at one direction, flat-indexed.
pub fn sh_basis(order: usize, dir: &Direction) -> Vec<f64> {
    let x = dir.polar_rad().cos().clamp(-1.0, 1.0);
    let az = dir.azimuth_rad();
    let mut out = vec![0.0; n_coefficients(order)];
    for m in 0..=order {
        let col = legendre_column(order, m, x);
        let (s, c) = (m as f64 * az).sin_cos();
        for l in m..=order {
            let v = normalisation(l, m) * col[l - m];
            if m == 0 {
                out[flat_index(l, 0)] = v;
            } else {
                let v = std::f64::consts::SQRT_2 * v;
                out[flat_index(l, m as i64)] = v * c;
                out[flat_index(l, -(m as i64))] = v * s;
            }
        }
    }
    out
}

/// One real SH function value.
pub fn real_sh(l: usize, m: i64, dir: &Direction) -> Result<f64> {
    if m.unsigned_abs() as usize > l {
        return Err(invalid(format!("|m| = {} exceeds l = {l}", m.abs())));
    }
    if l > MAX_ORDER {
        return Err(invalid(format!("degree {l} above supported maximum {MAX_ORDER}")));
    }
    Ok(sh_basis(l, dir)[flat_index(l, m)])
}

/// `[n_directions x (order+1)^2]` matrix of basis values, row-major.
pub fn design_matrix(grid: &SphericalGrid, order: usize) -> Result<DMatrix<f64>> {
    if grid.is_empty() {
        return Err(invalid("empty grid"));
    }
    if order > MAX_ORDER {
        return Err(invalid(format!("order {order} above supported maximum {MAX_ORDER}")));
    }
    let p = n_coefficients(order);
    let rows: Vec<Vec<f64>> = grid.directions().iter().map(|d| sh_basis(order, d)).collect();
    Ok(DMatrix::from_fn(grid.len(), p, |i, j| rows[i][j]))
}

/// Real SH coefficients of a two-ear dB magnitude field.
///
/// Layout is ear-major, then bin, then flat coefficient index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoefficients {
    order: usize,
    n_bins: usize,
    sample_rate_hz: f64,
    values: Vec<f64>,
}

impl ShCoefficients {
    pub fn new(order: usize, n_bins: usize, sample_rate_hz: f64, values: Vec<f64>) -> Result<Self> {
        let expected = 2 * n_bins * n_coefficients(order);
        if values.len() != expected {
            return Err(invalid(format!(
                "coefficient array has {} values, expected {expected}",
                values.len()
            )));
        }
        Ok(Self {
            order,
            n_bins,
            sample_rate_hz,
            values,
        })
    }

    pub fn zeros(order: usize, n_bins: usize, sample_rate_hz: f64) -> Self {
        Self {
            order,
            n_bins,
            sample_rate_hz,
            values: vec![0.0; 2 * n_bins * n_coefficients(order)],
        }
    }

    /// Assembles coefficients from per-ear `[(order+1)^2 x W]` row-major matrices.
    pub fn from_ear_matrices(
        order: usize,
        n_bins: usize,
        sample_rate_hz: f64,
        left: &[f64],
        right: &[f64],
    ) -> Result<Self> {
        let p = n_coefficients(order);
        if left.len() != p * n_bins || right.len() != p * n_bins {
            return Err(invalid("ear matrices do not match (order+1)^2 x bins"));
        }
        let mut out = Self::zeros(order, n_bins, sample_rate_hz);
        for (ear, src) in [left, right].into_iter().enumerate() {
            for j in 0..p {
                for w in 0..n_bins {
                    out.values[(ear * n_bins + w) * p + j] = src[j * n_bins + w];
                }
            }
        }
        Ok(out)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, ear: Ear, bin: usize, l: usize, m: i64) -> f64 {
        let p = n_coefficients(self.order);
        self.values[(ear.index() * self.n_bins + bin) * p + flat_index(l, m)]
    }

    pub fn set(&mut self, ear: Ear, bin: usize, l: usize, m: i64, v: f64) {
        let p = n_coefficients(self.order);
        self.values[(ear.index() * self.n_bins + bin) * p + flat_index(l, m)] = v;
    }

    /// One ear as a `[(order+1)^2 x W]` row-major matrix (tokens x channels).
    pub fn ear_matrix(&self, ear: Ear) -> Vec<f64> {
        let p = n_coefficients(self.order);
        let mut out = vec![0.0; p * self.n_bins];
        for w in 0..self.n_bins {
            let src = &self.values[(ear.index() * self.n_bins + w) * p..][..p];
            for j in 0..p {
                out[j * self.n_bins + w] = src[j];
            }
        }
        out
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ShCoefficients, b: f64) -> Result<Self> {
        if self.order != other.order || self.n_bins != other.n_bins {
            return Err(invalid("coefficient sets differ in order or bin count"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self { values, ..self.clone() })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShFitConfig {
    pub order: usize,
    pub ridge_lambda: f64,
}

impl ShFitConfig {
    pub fn new(order: usize, ridge_lambda: f64) -> Result<Self> {
        if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
            return Err(invalid(format!(
                "ridge_lambda must be finite and >= 0, got {ridge_lambda}"
            )));
        }
        if order > MAX_ORDER {
            return Err(invalid(format!("order {order} above supported maximum {MAX_ORDER}")));
        }
        Ok(Self { order, ridge_lambda })
    }
}

/// Solves `min |A c - b|^2 + lambda |P c|^2` for every column of `rhs`,
/// where `P` drops the first (degree-0) coefficient: the mean level is never
/// shrunk, so a constant field is reproduced exactly for any `lambda`.
///
/// Normal equations with Cholesky; an SVD pseudo-inverse of the normal
/// matrix when it is not numerically positive definite. With `lambda == 0`
/// a rank-deficient `A` is an error.
pub fn ridge_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>, lambda: f64) -> std::result::Result<DMatrix<f64>, String> {
    let (n, p) = a.shape();
    if lambda == 0.0 {
        if n < p {
            return Err(format!("{n} equations for {p} unknowns without regularisation"));
        }
        let sv = a.singular_values();
        let max = sv.max();
        let min = sv.min();
        if max.is_nan() || max <= 0.0 || min / max < RANK_TOLERANCE {
            return Err(format!(
                "design matrix is rank deficient (singular value ratio {:.3e})",
                if max > 0.0 { min / max } else { 0.0 }
            ));
        }
    }
    let at = a.transpose();
    let mut gram = &at * a;
    for i in 1..p {
        gram[(i, i)] += lambda;
    }
    let atb = &at * rhs;
    if let Some(chol) = gram.clone().cholesky() {
        return Ok(chol.solve(&atb));
    }
    let svd = SVD::new(gram, true, true);
    let eps = RANK_TOLERANCE * svd.singular_values.max();
    svd.solve(&atb, eps).map_err(|e| e.to_string())
}

/// Fits SH coefficients to the dB magnitudes of every ear and bin.
pub fn fit_sh(set: &HrtfSet, cfg: &ShFitConfig) -> Result<ShCoefficients> {
    let a = design_matrix(set.grid(), cfg.order)?;
    let w = set.n_bins();
    let n = set.n_directions();
    // columns: ear-major then bin
    let mut rhs = DMatrix::zeros(n, 2 * w);
    for d in 0..n {
        for ear in Ear::BOTH {
            for (b, &m) in set.spectrum(d, ear).iter().enumerate() {
                rhs[(d, ear.index() * w + b)] = crate::grid::linear_to_db(m);
            }
        }
    }
    let sol = ridge_solve(&a, &rhs, cfg.ridge_lambda).map_err(|reason| HrtfError::IllConditionedFit {
        ear: 0,
        bin: 0,
        reason,
    })?;
    let p = n_coefficients(cfg.order);
    let mut values = vec![0.0; 2 * w * p];
    for col in 0..2 * w {
        for j in 0..p {
            values[col * p + j] = sol[(j, col)];
        }
    }
    ShCoefficients::new(cfg.order, w, set.sample_rate_hz(), values)
}

/// Per-ear `[n_directions x W]` dB fields synthesised from coefficients.
pub fn eval_sh_db(coeffs: &ShCoefficients, grid: &SphericalGrid) -> Result<[Vec<f64>; 2]> {
    let a = design_matrix(grid, coeffs.order())?;
    let w = coeffs.n_bins();
    let p = n_coefficients(coeffs.order());
    let fields = Ear::BOTH.map(|ear| {
        let c = DMatrix::from_row_slice(p, w, &coeffs.ear_matrix(ear));
        let f = &a * c;
        let mut out = Vec::with_capacity(grid.len() * w);
        for i in 0..grid.len() {
            for b in 0..w {
                out.push(f[(i, b)]);
            }
        }
        out
    });
    Ok(fields)
}

/// Synthesises an HRTF set on `grid` (evaluated in dB, returned linear).
pub fn eval_sh(coeffs: &ShCoefficients, grid: &SphericalGrid) -> Result<HrtfSet> {
    let [l, r] = eval_sh_db(coeffs, grid)?;
    HrtfSet::from_ear_db(grid.clone(), coeffs.sample_rate_hz(), coeffs.n_bins(), &l, &r)
}

/// Fits many sets in parallel; output order matches input order.
pub fn fit_many(sets: &[HrtfSet], cfg: &ShFitConfig) -> Result<Vec<ShCoefficients>> {
    sets.par_iter().map(|s| fit_sh(s, cfg)).collect()
}
