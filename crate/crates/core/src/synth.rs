//! Seeded synthetic subjects with an exact spherical-harmonic band limit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Direction, Ear, HrtfSet, SparseMeasurement, SparsityLevel, SphericalGrid};
use crate::rng::{self, Domain};
use crate::sht::{self, flat_index, ShCoefficients};

/// Key used for the field shared by both ears.
const SHARED_EAR_KEY: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub band_limit: usize,
    pub n_bins: usize,
    pub n_az: usize,
    pub n_el: usize,
    /// Per-degree variance is `(1 / (1 + l))^degree_decay`.
    pub degree_decay: f64,
    /// 0 gives identical ears, 1 gives independent ears.
    pub interaural_asymmetry: f64,
    pub sample_rate_hz: f64,
    /// Seed of the template shared by every subject of a cohort.
    pub population_seed: u64,
    /// 0 gives independent subjects, 1 gives copies of the template.
    pub population_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            band_limit: 7,
            n_bins: 16,
            n_az: 16,
            n_el: 8,
            degree_decay: 2.0,
            interaural_asymmetry: 0.5,
            sample_rate_hz: 48_000.0,
            population_seed: 0,
            population_share: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.band_limit < 1 {
            return Err(invalid("band_limit must be >= 1"));
        }
        if self.n_bins < 2 {
            return Err(invalid("n_bins must be >= 2"));
        }
        if !(self.degree_decay > 0.0 && self.degree_decay.is_finite()) {
            return Err(invalid("degree_decay must be positive"));
        }
        if !(0.0..=1.0).contains(&self.interaural_asymmetry) {
            return Err(invalid("interaural_asymmetry must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.population_share) {
            return Err(invalid("population_share must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Config for the `index`-th subject of a cohort sharing `self.seed` and
    /// the population template.
    pub fn for_subject(&self, index: u64) -> Self {
        Self {
            seed: rng::stream_id(Domain::SynthCoefficient, &[self.seed, index]),
            ..*self
        }
    }

    pub fn degree_variance(&self, l: usize) -> f64 {
        (1.0 / (1.0 + l as f64)).powf(self.degree_decay)
    }

    pub fn grid(&self) -> Result<SphericalGrid> {
        SphericalGrid::equiangular(self.n_az, self.n_el)
    }
}

/// Raw (pre-smoothing) coefficient draw for one ear key, bin and `(l, m)`.
fn draw(cfg: &SynthConfig, seed: u64, ear_key: u64, bin: usize, l: usize, m: i64) -> f64 {
    let std = cfg.degree_variance(l).sqrt();
    std * rng::normal(
        seed,
        Domain::SynthCoefficient,
        &[ear_key, bin as u64, l as u64, m as u64],
    )
}

/// Shared-plus-own ear mix for one source seed.
fn ear_draw(cfg: &SynthConfig, seed: u64, ear: Ear, bin: usize, l: usize, m: i64) -> f64 {
    let a = cfg.interaural_asymmetry;
    (1.0 - a).sqrt() * draw(cfg, seed, SHARED_EAR_KEY, bin, l, m)
        + a.sqrt() * draw(cfg, seed, ear.index() as u64, bin, l, m)
}

/// The band-limited coefficients behind [`generate_subject`].
pub fn subject_coefficients(cfg: &SynthConfig) -> Result<ShCoefficients> {
    cfg.validate()?;
    let l_max = cfg.band_limit;
    let w = cfg.n_bins;
    let p = cfg.population_share;
    let (pop_w, own_w) = (p.sqrt(), (1.0 - p).sqrt());
    let mut raw = ShCoefficients::zeros(l_max, w, cfg.sample_rate_hz);
    for ear in Ear::BOTH {
        for b in 0..w {
            for l in 0..=l_max {
                for m in -(l as i64)..=(l as i64) {
                    let v = pop_w * ear_draw(cfg, cfg.population_seed, ear, b, l, m)
                        + own_w * ear_draw(cfg, cfg.seed, ear, b, l, m);
                    raw.set(ear, b, l, m, v);
                }
            }
        }
    }
    // [0.25, 0.5, 0.25] across bins, edges replicated
    let mut smooth = raw.clone();
    for ear in Ear::BOTH {
        for b in 0..w {
            let lo = b.saturating_sub(1);
            let hi = (b + 1).min(w - 1);
            for l in 0..=l_max {
                for m in -(l as i64)..=(l as i64) {
                    let v = 0.25 * raw.get(ear, lo, l, m) + 0.5 * raw.get(ear, b, l, m) + 0.25 * raw.get(ear, hi, l, m);
                    smooth.set(ear, b, l, m, v);
                }
            }
        }
    }
    debug_assert_eq!(flat_index(l_max, l_max as i64) + 1, sht::n_coefficients(l_max));
    Ok(smooth)
}

/// Deterministic synthetic subject on the configured equiangular grid.
pub fn generate_subject(cfg: &SynthConfig) -> Result<HrtfSet> {
    let coeffs = subject_coefficients(cfg)?;
    sht::eval_sh(&coeffs, &cfg.grid()?)
}

/// Indices chosen by farthest-point sampling on the sphere.
///
/// Starts from the direction nearest azimuth 0, elevation 0; each further
/// pick maximises the great-circle distance to the chosen set. Ties go to
/// the lower index. The greedy result is then polished by single-point
/// swaps until no swap raises the minimum pairwise distance.
pub fn farthest_point_indices(grid: &SphericalGrid, count: usize) -> Result<Vec<usize>> {
    let n = grid.len();
    if count > n {
        return Err(invalid(format!("cannot select {count} directions from a grid of {n}")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let dirs = grid.directions();
    let front = Direction::new(0.0, 0.0)?;
    let first = grid.nearest(&front);
    let mut chosen = vec![first];
    let mut min_dist: Vec<f64> = dirs.iter().map(|d| d.angle_to(&dirs[first])).collect();
    let mut taken = vec![false; n];
    taken[first] = true;
    while chosen.len() < count {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && min_dist[i] > best_d {
                best = i;
                best_d = min_dist[i];
            }
        }
        taken[best] = true;
        chosen.push(best);
        for i in 0..n {
            let d = dirs[i].angle_to(&dirs[best]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    refine_by_swaps(grid, &mut chosen, &mut taken);
    Ok(chosen)
}

/// Smallest pairwise distance among `set`, skipping position `skip`.
fn min_pairwise(dirs: &[Direction], set: &[usize], skip: Option<usize>) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..set.len() {
        if Some(i) == skip {
            continue;
        }
        for j in 0..i {
            if Some(j) == skip {
                continue;
            }
            m = m.min(dirs[set[i]].angle_to(&dirs[set[j]]));
        }
    }
    m
}

/// Exchanges single points while that strictly raises the minimum pairwise
/// distance. First improving swap in (position, candidate index) order wins.
fn refine_by_swaps(grid: &SphericalGrid, chosen: &mut [usize], taken: &mut [bool]) {
    const GAIN: f64 = 1e-12;
    let dirs = grid.directions();
    if chosen.len() < 2 {
        return;
    }
    let mut current = min_pairwise(dirs, chosen, None);
    'outer: loop {
        for k in 0..chosen.len() {
            let rest = min_pairwise(dirs, chosen, Some(k));
            if rest <= current + GAIN {
                continue;
            }
            for c in 0..dirs.len() {
                if taken[c] {
                    continue;
                }
                let to_c = chosen
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != k)
                    .map(|(_, &s)| dirs[s].angle_to(&dirs[c]))
                    .fold(f64::INFINITY, f64::min);
                let candidate = rest.min(to_c);
                if candidate > current + GAIN {
                    taken[chosen[k]] = false;
                    taken[c] = true;
                    chosen[k] = c;
                    current = candidate;
                    continue 'outer;
                }
            }
        }
        break;
    }
}

/// Sparse measurement of `full` at the given level.
///
/// `scheme_seed` is reserved for randomised selection schemes; farthest-point
/// sampling ignores it.
pub fn make_sparse(full: &HrtfSet, level: SparsityLevel, scheme_seed: u64) -> Result<SparseMeasurement> {
    let _ = scheme_seed;
    let idx = farthest_point_indices(full.grid(), level.count())?;
    SparseMeasurement::new(full.select(&idx)?, level)
}
